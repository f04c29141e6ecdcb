use ldfc::datagen::{combined_stats, generate, GenSpec, SourceStats};
use ldfc::ir::{Activation, ChannelStats};
use ldfc::precondition::{afcle, fuse_batchnorm, AfcleConfig};
use ldfc::toy::{toy_network, Topology};

fn spec(sources: Vec<SourceStats>, c: usize, batch: usize, seed: u64) -> GenSpec {
    GenSpec {
        block: "probe".into(),
        sources,
        scale: vec![1.0; c],
        shape: [c, 1, 1],
        batch,
        seed,
        stream: "moments".into(),
        include_activations: false,
    }
}

/// Per-channel mean and standard deviation.
fn moments(x: &[f32], c: usize) -> Vec<(f64, f64)> {
    (0..c)
        .map(|ch| {
            let v: Vec<f64> = x.iter().skip(ch).step_by(c).map(|&v| v as f64).collect();
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            (m, var.sqrt())
        })
        .collect()
}

#[test]
fn summed_predecessors_follow_the_combined_statistics() {
    let a = ChannelStats {
        mean: vec![1.0, -2.0],
        std: vec![0.5, 2.0],
    };
    let b = ChannelStats {
        mean: vec![3.0, 0.5],
        std: vec![1.2, 1.5],
    };
    let source = |s: &ChannelStats| SourceStats {
        mean: s.mean.iter().map(|&v| v as f64).collect(),
        std: s.std.iter().map(|&v| v as f64).collect(),
        activation: Activation::Relu,
    };
    let x = generate(&spec(vec![source(&a), source(&b)], 2, 500_000, 9)).unwrap();
    let expected = combined_stats(&a, &b).unwrap();
    for (ch, (m, s)) in moments(x.data(), 2).into_iter().enumerate() {
        let (em, es) = (expected.mean[ch] as f64, expected.std[ch] as f64);
        assert!((m - em).abs() <= 0.01 * em.abs(), "channel {ch} mean {m} vs {em}");
        assert!((s - es).abs() <= 0.01 * es, "channel {ch} std {s} vs {es}");
    }
}

#[test]
fn network_inputs_are_standard_normal() {
    let x = generate(&spec(vec![], 1, 1_000_000, 4)).unwrap();
    let (m, s) = moments(x.data(), 1)[0];
    assert!(m.abs() < 0.005, "mean {m}");
    assert!((s - 1.0).abs() < 0.005, "std {s}");
}

fn correlation(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    cov / (va * vb).sqrt()
}

#[test]
fn seeds_and_streams_are_independent() {
    let base = spec(vec![], 1, 100_000, 1);
    let a = generate(&base).unwrap();
    assert_eq!(a, generate(&base).unwrap());
    let other_seed = generate(&GenSpec {
        seed: 2,
        ..base.clone()
    })
    .unwrap();
    let other_stream = generate(&GenSpec {
        stream: "other".into(),
        ..base.clone()
    })
    .unwrap();
    let other_block = generate(&GenSpec {
        block: "elsewhere".into(),
        ..base
    })
    .unwrap();
    for b in [&other_seed, &other_stream, &other_block] {
        let r = correlation(a.data(), b.data());
        assert!(r.abs() < 0.01, "correlation {r}");
    }
}

#[test]
fn block_specs_follow_the_graph() {
    let mut g = toy_network(Topology::Residual, 3);
    fuse_batchnorm(&mut g).unwrap();
    afcle(&mut g, &AfcleConfig::default()).unwrap();
    let shapes = g.shapes().unwrap();
    for i in 0..g.blocks.len() {
        let s = GenSpec::for_block(&g, i, 4, 0, "layout", true).unwrap();
        assert_eq!(s.sources.len(), g.blocks[i].predecessors.len());
        assert_eq!(s.shape, shapes[i].conv_input);
        assert_eq!(s.scale, g.blocks[i].eq.v_in_f64());
        let x = generate(&s).unwrap();
        assert_eq!(x.shape(), &[4, s.shape[0], s.shape[1], s.shape[2]]);
    }
    assert!(g.blocks.iter().any(|b| b.predecessors.len() == 2));
}

#[test]
fn buffer_scaling_is_per_channel() {
    let mut g = toy_network(Topology::Chain, 8);
    fuse_batchnorm(&mut g).unwrap();
    let plain = GenSpec::for_block(&g, 1, 16, 5, "scale", true).unwrap();
    afcle(&mut g, &AfcleConfig::default()).unwrap();
    let scaled = GenSpec::for_block(&g, 1, 16, 5, "scale", true).unwrap();
    assert_ne!(plain.scale, scaled.scale);
    let x = generate(&plain).unwrap();
    let y = generate(&GenSpec {
        scale: plain.scale.clone(),
        ..scaled.clone()
    })
    .unwrap();
    assert_eq!(x, y);
    let z = generate(&scaled).unwrap();
    let [c, h, w] = scaled.shape;
    for (i, (a, b)) in x.data().iter().zip(z.data()).enumerate() {
        let ch = i / (h * w) % c;
        let want = *a as f64 * scaled.scale[ch];
        assert!((*b as f64 - want).abs() <= 1e-6 * want.abs().max(1e-6), "{b} vs {want}");
    }
}
