use ldfc::datagen::GenSpec;
use ldfc::ir::{ForwardMode, NetworkGraph, StrState};
use ldfc::precondition::{afcle, fold_buffers, fuse_batchnorm, AfcleConfig};
use ldfc::prune::{
    baseline_budgets, prune_network, prune_network_in_order, prune_to_budget, train_layer, BaselineMethod, PruneConfig,
};
use ldfc::toy::{random_input, relative_deviation, toy_network, Topology};

fn quick(s0: f64, lambda: f64, iterations: usize) -> PruneConfig {
    PruneConfig {
        s0,
        lambda,
        iterations,
        batch: 16,
        ..Default::default()
    }
}

fn preconditioned(g: &NetworkGraph) -> NetworkGraph {
    let mut p = g.clone();
    fuse_batchnorm(&mut p).unwrap();
    afcle(&mut p, &AfcleConfig::default()).unwrap();
    p
}

fn float(g: &NetworkGraph, x: &ldfc::tensor::Tensor) -> ldfc::tensor::Tensor {
    g.forward(x, ForwardMode::Float).unwrap()
}

#[test]
fn untrained_vanishing_threshold_is_the_identity() {
    for t in Topology::ALL {
        let g = toy_network(t, 60);
        let (p, r) = prune_network(&g, &quick(-20.0, 0.0, 0)).unwrap();
        let x = random_input(g.input_shape, 32, 1);
        assert!(
            relative_deviation(&float(&g, &x), &float(&p, &x)) <= 1e-5,
            "{}",
            t.name()
        );
        assert!(p.buffers_are_identity());
        assert_eq!(r.total_sparsity, 0.0);
        assert!(r.layers.iter().all(|l| l.s_final == -20.0 && l.losses.is_empty()));
    }
}

#[test]
fn vanishing_threshold_prunes_nothing() {
    for t in Topology::ALL {
        let g = toy_network(t, 61);
        let (p, r) = prune_network(&g, &quick(-20.0, 0.0, 300)).unwrap();
        assert_eq!(r.total_sparsity, 0.0);
        assert!(r.layers.iter().all(|l| (l.s_final + 20.0).abs() < 0.5));
        let x = random_input(g.input_shape, 64, 2);
        let d = relative_deviation(&float(&g, &x), &float(&p, &x));
        assert!(d <= 1e-2, "{}: {d}", t.name());
    }
}

#[test]
fn decay_raises_the_threshold_from_the_default_start() {
    for t in Topology::ALL {
        let g = toy_network(t, 62);
        let (_, r) = prune_network(&g, &quick(-5.0, 1.551757813e-5, 1000)).unwrap();
        for l in &r.layers {
            assert!(
                l.s_final > l.s_initial,
                "{} {}: {} -> {}",
                t.name(),
                l.block,
                l.s_initial,
                l.s_final
            );
        }
        let (_, flat) = prune_network(
            &g,
            &PruneConfig {
                loss_grad_to_s: false,
                ..quick(-3.0, 1e-4, 50)
            },
        )
        .unwrap();
        assert!(flat.layers.iter().all(|l| l.s_final > l.s_initial));
    }
}

/// Mean and standard error of each consecutive window.
fn windows(losses: &[f64], size: usize) -> Vec<(f64, f64)> {
    losses
        .chunks(size)
        .map(|w| {
            let n = w.len() as f64;
            let m = w.iter().sum::<f64>() / n;
            let var = w.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, (var / n).sqrt())
        })
        .collect()
}

#[test]
fn loss_trend_decreases_without_decay() {
    let g = preconditioned(&toy_network(Topology::Chain, 63));
    let config = quick(-2.5, 0.0, 1000);
    for i in 0..g.blocks.len() {
        let spec = GenSpec::for_block(&g, i, config.batch, 0, "prune", false).unwrap();
        let mut student = g.blocks[i].clone();
        student.str_state = Some(StrState::new(config.s0, config.lambda).unwrap());
        let r = train_layer(&g.blocks[i], &mut student, &spec, &config).unwrap();
        let w = windows(&r.losses, 100);
        for pair in w.windows(2) {
            let noise = 3.0 * pair[0].1.hypot(pair[1].1);
            assert!(pair[1].0 <= pair[0].0 + noise, "{}: {w:?}", g.blocks[i].id);
        }
        assert!(w[w.len() - 1].0 < 0.5 * w[0].0, "{}: {w:?}", g.blocks[i].id);
    }
}

#[test]
fn training_leaves_the_teacher_and_bias_alone() {
    let g = preconditioned(&toy_network(Topology::Residual, 64));
    let config = quick(-3.0, 1e-4, 20);
    for i in 0..g.blocks.len() {
        let teacher = g.blocks[i].clone();
        let spec = GenSpec::for_block(&g, i, config.batch, 0, "prune", false).unwrap();
        let mut student = teacher.clone();
        let before = teacher.clone();
        train_layer(&teacher, &mut student, &spec, &config).unwrap();
        assert_eq!(teacher, before);
        assert_eq!(student.conv.bias, teacher.conv.bias);
        assert_eq!(student.eq, teacher.eq);
        assert_ne!(student.conv.weight, teacher.conv.weight);
        assert!(student.str_state.unwrap().step == 20);
    }
}

#[test]
fn layer_order_does_not_matter() {
    let g = toy_network(Topology::Depthwise, 65);
    let config = quick(-3.0, 1e-4, 10);
    let (a, ra) = prune_network(&g, &config).unwrap();
    let reversed: Vec<usize> = (0..g.blocks.len()).rev().collect();
    let (b, rb) = prune_network_in_order(&g, &config, Some(&reversed)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.baked, rb.baked);
    assert!(prune_network_in_order(&g, &config, Some(&reversed[1..])).is_err());
}

#[test]
fn budget_ablation_matches_the_learned_layer_sizes() {
    let g = toy_network(Topology::Chain, 66);
    let (pruned, _) = prune_network(&g, &quick(-2.0, 1e-4, 20)).unwrap();
    let (_, dense) = baseline_budgets(&g, 0.0, BaselineMethod::Uniform).unwrap();
    let budget: Vec<_> = dense
        .layers
        .iter()
        .zip(&pruned.blocks)
        .map(|(l, b)| ldfc::prune::LayerBudget {
            kept: b.conv.weight.data().iter().filter(|&&w| w != 0.0).count(),
            ..l.clone()
        })
        .collect();
    let ablation = prune_to_budget(&preconditioned(&g), &budget).unwrap();
    for (a, l) in ablation.blocks.iter().zip(&budget) {
        assert_eq!(
            a.conv.weight.data().iter().filter(|&&w| w != 0.0).count(),
            l.kept,
            "{}",
            l.block
        );
    }
    assert!(ablation.buffers_are_identity());
}

#[test]
fn folding_after_pruning_keeps_zeros() {
    let g = toy_network(Topology::Residual, 67);
    let (p, r) = prune_network(&g, &quick(-2.0, 1e-4, 10)).unwrap();
    let mut refolded = p.clone();
    fold_buffers(&mut refolded);
    assert_eq!(refolded, p);
    for (b, baked) in p.blocks.iter().zip(&r.baked) {
        assert_eq!(b.conv.weight.data().iter().filter(|&&w| w == 0.0).count(), baked.zeros);
    }
    assert!(r.total_sparsity > 0.0);
}
