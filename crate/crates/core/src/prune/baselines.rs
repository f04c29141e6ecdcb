//! Magnitude-pruning baselines: one global threshold, a uniform per-layer
//! rate, and the ERK per-layer budget. Every layer keeps at least one weight.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::NetworkGraph;
use crate::precondition::{fold_buffers, fuse_batchnorm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    Global,
    Uniform,
    Erk,
}

impl std::str::FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(BaselineMethod::Global),
            "uniform" => Ok(BaselineMethod::Uniform),
            "erk" => Ok(BaselineMethod::Erk),
            other => Err(Error::InvalidArgument(format!("unknown baseline '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBudget {
    pub block: String,
    pub weights: usize,
    /// Number of weights left non-zero by the budget.
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub method: String,
    pub target_sparsity: f64,
    pub achieved_sparsity: f64,
    pub layers: Vec<LayerBudget>,
}

/// ERK kept-density factor `(c_o + c_i + k_h + k_w) / (c_o c_i k_h k_w)`.
pub fn erk_density_factor(c_out: usize, c_in: usize, kh: usize, kw: usize) -> f64 {
    (c_out + c_in + kh + kw) as f64 / (c_out * c_in * kh * kw) as f64
}

/// Highest sparsity reachable while every layer keeps one weight.
pub fn max_sparsity(graph: &NetworkGraph) -> f64 {
    let n = graph.weight_count();
    1.0 - graph.blocks.len() as f64 / n.max(1) as f64
}

fn check_target(graph: &NetworkGraph, target: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::InvalidArgument(format!(
            "target sparsity {target} is outside [0, 1]"
        )));
    }
    let max = max_sparsity(graph);
    if target > max + 1e-12 {
        return Err(Error::UnreachableSparsity {
            target,
            max_achievable: max,
        });
    }
    Ok(())
}

fn by_magnitude(a: (f32, usize), b: (f32, usize)) -> Ordering {
    a.0.abs().total_cmp(&b.0.abs()).then(a.1.cmp(&b.1))
}

/// Zeroes all but the `kept` largest-magnitude weights of each listed block
/// (ties resolved by position).
fn apply_kept(graph: &mut NetworkGraph, kept: &[usize]) {
    for (b, &k) in graph.blocks.iter_mut().zip(kept) {
        let w = b.conv.weight.data_mut();
        let mut order: Vec<(f32, usize)> = w.iter().copied().zip(0..).collect();
        order.sort_by(|a, b| by_magnitude(*a, *b));
        let prune = w.len().saturating_sub(k);
        for &(_, i) in &order[..prune] {
            w[i] = 0.0;
        }
    }
}

fn budgets(graph: &NetworkGraph, kept: &[usize]) -> Vec<LayerBudget> {
    graph
        .blocks
        .iter()
        .zip(kept)
        .map(|(b, &k)| LayerBudget {
            block: b.id.clone(),
            weights: b.conv.weight.len(),
            kept: k,
        })
        .collect()
}

fn erk_kept(graph: &NetworkGraph, target: f64) -> Vec<usize> {
    let sizes: Vec<usize> = graph.blocks.iter().map(|b| b.conv.weight.len()).collect();
    let factors: Vec<f64> = graph
        .blocks
        .iter()
        .map(|b| {
            let s = b.conv.weight.shape();
            erk_density_factor(s[0], s[1], s[2], s[3])
        })
        .collect();
    let total_keep = (1.0 - target) * sizes.iter().sum::<usize>() as f64;
    let mut dense = vec![false; sizes.len()];
    let density = loop {
        let fixed: f64 = sizes
            .iter()
            .zip(&dense)
            .filter(|(_, &d)| d)
            .map(|(&n, _)| n as f64)
            .sum();
        let weighted: f64 = sizes
            .iter()
            .zip(&factors)
            .zip(&dense)
            .filter(|(_, &d)| !d)
            .map(|((&n, &p), _)| n as f64 * p)
            .sum();
        let eps = if weighted > 0.0 {
            (total_keep - fixed) / weighted
        } else {
            0.0
        };
        let mut changed = false;
        for (i, &p) in factors.iter().enumerate() {
            if !dense[i] && eps * p > 1.0 {
                dense[i] = true;
                changed = true;
            }
        }
        if !changed {
            break factors
                .iter()
                .zip(&dense)
                .map(|(&p, &d)| if d { 1.0 } else { (eps * p).max(0.0) })
                .collect::<Vec<f64>>();
        }
    };
    sizes
        .iter()
        .zip(&density)
        .map(|(&n, &d)| ((d * n as f64).round() as usize).clamp(1, n))
        .collect()
}

fn global_kept(graph: &NetworkGraph, target: f64) -> Vec<usize> {
    let mut all: Vec<(f32, usize, usize)> = Vec::with_capacity(graph.weight_count());
    for (l, b) in graph.blocks.iter().enumerate() {
        all.extend(b.conv.weight.data().iter().enumerate().map(|(i, &w)| (w, l, i)));
    }
    all.sort_by(|a, b| a.0.abs().total_cmp(&b.0.abs()).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut kept: Vec<usize> = graph.blocks.iter().map(|b| b.conv.weight.len()).collect();
    let mut remaining = (target * all.len() as f64).round() as usize;
    for &(_, l, _) in &all {
        if remaining == 0 {
            break;
        }
        if kept[l] > 1 {
            kept[l] -= 1;
            remaining -= 1;
        }
    }
    kept
}

/// Baseline pruning to `target` sparsity on the BatchNorm-fused network
/// (fused here if needed). Equalization must not have been applied.
pub fn baseline_budgets(
    graph: &NetworkGraph,
    target: f64,
    method: BaselineMethod,
) -> Result<(NetworkGraph, BaselineReport)> {
    let mut g = graph.clone();
    fuse_batchnorm(&mut g)?;
    if !g.buffers_are_identity() {
        return Err(Error::InvalidArgument(
            "baselines run on the un-equalized network; found non-identity buffers".into(),
        ));
    }
    check_target(&g, target)?;
    let kept = match method {
        BaselineMethod::Global => global_kept(&g, target),
        BaselineMethod::Uniform => g
            .blocks
            .iter()
            .map(|b| {
                let n = b.conv.weight.len();
                n - ((target * n as f64).round() as usize).min(n - 1)
            })
            .collect(),
        BaselineMethod::Erk => erk_kept(&g, target),
    };
    apply_kept(&mut g, &kept);
    let report = BaselineReport {
        method: format!("{method:?}").to_lowercase(),
        target_sparsity: target,
        achieved_sparsity: g.sparsity(),
        layers: budgets(&g, &kept),
    };
    Ok((g, report))
}

/// Zeroes every weight with `|w| < threshold` (BatchNorm fused first).
pub fn prune_global_threshold(graph: &NetworkGraph, threshold: f64) -> Result<NetworkGraph> {
    let mut g = graph.clone();
    fuse_batchnorm(&mut g)?;
    for b in &mut g.blocks {
        for w in b.conv.weight.data_mut() {
            if ((*w).abs() as f64) < threshold {
                *w = 0.0;
            }
        }
    }
    Ok(g)
}

/// The untrained "budget" ablation: magnitude-prunes each layer of the
/// preconditioned network to a given per-layer budget, then folds the buffers.
pub fn prune_to_budget(preconditioned: &NetworkGraph, budget: &[LayerBudget]) -> Result<NetworkGraph> {
    let mut g = preconditioned.clone();
    let mut kept = Vec::with_capacity(g.blocks.len());
    for b in &g.blocks {
        let entry = budget
            .iter()
            .find(|e| e.block == b.id)
            .ok_or_else(|| Error::UnknownBlock(b.id.clone()))?;
        kept.push(entry.kept.min(b.conv.weight.len()));
    }
    apply_kept(&mut g, &kept);
    fold_buffers(&mut g);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{toy_network, Topology};

    #[test]
    fn erk_factors() {
        assert_eq!(erk_density_factor(64, 32, 3, 3), 102.0 / 18432.0);
        assert_eq!(erk_density_factor(1000, 512, 1, 1), 1514.0 / 512000.0);
    }

    #[test]
    fn budgets_hit_their_targets() {
        let g = toy_network(Topology::Chain, 4);
        let n = g.weight_count() as f64;
        for m in [BaselineMethod::Global, BaselineMethod::Uniform, BaselineMethod::Erk] {
            for target in [0.0, 0.3, 0.7, 0.9] {
                let (p, r) = baseline_budgets(&g, target, m).unwrap();
                assert!(
                    (r.achieved_sparsity - target).abs() <= 0.5 * g.blocks.len() as f64 / n + 1e-9,
                    "{m:?} {target}: {}",
                    r.achieved_sparsity
                );
                assert!(p.blocks.iter().all(|b| b.conv.weight.data().iter().any(|&w| w != 0.0)));
            }
        }
    }

    #[test]
    fn erk_spares_small_layers() {
        let g = toy_network(Topology::Depthwise, 4);
        let (_, r) = baseline_budgets(&g, 0.5, BaselineMethod::Erk).unwrap();
        let density = |id: &str| {
            let l = r.layers.iter().find(|l| l.block == id).unwrap();
            l.kept as f64 / l.weights as f64
        };
        assert!(density("dw1") > density("pw2"));
    }

    #[test]
    fn unreachable_target() {
        let g = toy_network(Topology::Chain, 4);
        let err = baseline_budgets(&g, 0.9999, BaselineMethod::Uniform).unwrap_err();
        assert!(matches!(err, Error::UnreachableSparsity { .. }));
    }

    #[test]
    fn zero_threshold_keeps_everything_nonzero() {
        let mut g = toy_network(Topology::Chain, 4);
        g.blocks[0].conv.weight.data_mut()[..5]
            .iter_mut()
            .for_each(|w| *w = 0.0);
        let zeros = 5.0 / g.weight_count() as f64;
        let p = prune_global_threshold(&g, 0.0).unwrap();
        assert_eq!(p.sparsity(), zeros);
    }
}
