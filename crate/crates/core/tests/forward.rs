use std::collections::HashSet;

use ldfc::ir::{Activation, Block, ForwardMode, NetworkGraph, QuantParams, StrState};
use ldfc::tensor::{relu, ConvSpec, Tensor};
use ldfc::toy::{random_input, relative_deviation, toy_network, Topology};
use ldfc::Error;

fn identity_block(c: usize, activation: Activation) -> NetworkGraph {
    let mut w = vec![0.0f32; c * c];
    for i in 0..c {
        w[i * c + i] = 1.0;
    }
    let conv = ConvSpec::new(
        Tensor::new(vec![c, c, 1, 1], w).unwrap(),
        Tensor::zeros(vec![c]),
        [1, 1],
        [0, 0],
        1,
    )
    .unwrap();
    NetworkGraph::new(vec![Block::new("only", conv, activation, vec![])], [c, 4, 4]).unwrap()
}

/// Quantizers on every site with ranges covering what the site sees on `x`.
fn cover_ranges(g: &mut NetworkGraph, x: &Tensor, bits: u8) {
    let trace = g.forward_trace(x, ForwardMode::Float).unwrap();
    for (b, xin) in g.blocks.iter_mut().zip(&trace.conv_inputs) {
        let (lo, hi) = xin.min_max().unwrap();
        b.act_quant = Some(QuantParams::new(lo.min(0.0), hi.max(0.0) + 1e-6, bits).unwrap());
        let (wl, wh) = b.conv.weight.min_max().unwrap();
        b.weight_quant = Some(QuantParams::new(wl, wh, bits).unwrap());
    }
}

#[test]
fn identity_block_is_relu() {
    let g = identity_block(3, Activation::Relu);
    let x = random_input(g.input_shape, 2, 9);
    assert_eq!(g.forward(&x, ForwardMode::Float).unwrap(), relu(&x));
}

#[test]
fn sixteen_bit_simulation_is_near_float() {
    for t in Topology::ALL {
        let mut g = toy_network(t, 21);
        let x = random_input(g.input_shape, 16, 1);
        cover_ranges(&mut g, &x, 16);
        let f = g.forward(&x, ForwardMode::Float).unwrap();
        let q = g.forward(&x, ForwardMode::QuantSim).unwrap();
        let d = relative_deviation(&f, &q);
        assert!(d <= 1e-3, "{}: {d}", t.name());
    }
}

#[test]
fn vanishing_threshold_matches_float() {
    for t in Topology::ALL {
        let mut g = toy_network(t, 22);
        for b in &mut g.blocks {
            b.str_state = Some(StrState::new(-20.0, 0.0).unwrap());
        }
        let x = random_input(g.input_shape, 16, 2);
        let f = g.forward(&x, ForwardMode::Float).unwrap();
        let s = g.forward(&x, ForwardMode::Str).unwrap();
        assert!(relative_deviation(&f, &s) <= 1e-5, "{}", t.name());
    }
}

#[test]
fn unknown_activation_is_an_error() {
    let g = identity_block(2, Activation::Other("gelu_tanh".into()));
    let x = random_input(g.input_shape, 1, 3);
    match g.forward(&x, ForwardMode::Float) {
        Err(Error::UnsupportedActivation { block, activation, .. }) => {
            assert_eq!(block, "only");
            assert_eq!(activation, "gelu_tanh");
        }
        other => panic!("expected an unsupported-activation error, got {other:?}"),
    }
    let known = identity_block(2, Activation::Other("relu6".into()));
    let y = known.forward(&x, ForwardMode::Float).unwrap();
    assert!(y.data().iter().all(|&v| (0.0..=6.0).contains(&v)));
}

#[test]
fn quantized_sites_take_few_values() {
    for t in Topology::ALL {
        for bits in [2u8, 3, 4] {
            let mut g = toy_network(t, 23);
            let x = random_input(g.input_shape, 8, 4);
            cover_ranges(&mut g, &x, bits);
            let trace = g.forward_trace(&x, ForwardMode::QuantSim).unwrap();
            for (b, xin) in g.blocks.iter().zip(&trace.conv_inputs) {
                let distinct: HashSet<u32> = xin.data().iter().map(|v| v.to_bits()).collect();
                assert!(
                    distinct.len() <= 1 << bits,
                    "{} {} {bits}: {}",
                    t.name(),
                    b.id,
                    distinct.len()
                );
            }
        }
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let g = toy_network(Topology::Chain, 24);
    let x = random_input([3, 7, 8], 1, 5);
    assert!(matches!(g.forward(&x, ForwardMode::Float), Err(Error::Shape { .. })));
}

#[test]
fn trace_records_physical_inputs() {
    let g = toy_network(Topology::Residual, 25);
    let x = random_input(g.input_shape, 3, 6);
    let trace = g.forward_trace(&x, ForwardMode::Float).unwrap();
    assert_eq!(trace.conv_inputs.len(), g.blocks.len());
    assert_eq!(trace.conv_inputs[0], x);
    let shapes = g.shapes().unwrap();
    for (s, xin) in shapes.iter().zip(&trace.conv_inputs) {
        assert_eq!(&xin.shape()[1..], &s.conv_input);
    }
    assert_eq!(trace.output, g.forward(&x, ForwardMode::Float).unwrap());
}
