//! Cross-layer equalization with recording buffers.
//!
//! For a pair `prev -> next` sharing channel `c`, let `r` be the largest
//! absolute weight in row `c` of `prev` and `q` the largest absolute weight
//! reading input channel `c` in `next`. With `s = sqrt(r q) / r`, row `c` of
//! `prev` and its bias are multiplied by `s` while `prev.v_out[c]` is divided
//! by `s`; the weights of `next` reading channel `c` are divided by `s` while
//! `next.v_in[c]` is multiplied by `s`. Each buffered layer
//! `(W (x * v_in) + b) * v_out` is exactly unchanged and both maxima become
//! `sqrt(r q)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{Combine, NetworkGraph};
use crate::tensor::ConvSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AfcleConfig {
    /// Stop once the mean `|s - 1|` over a sweep drops below this.
    pub eps_stop: f64,
    pub max_sweeps: usize,
}

impl Default for AfcleConfig {
    fn default() -> Self {
        AfcleConfig {
            eps_stop: 0.001,
            max_sweeps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub prev: String,
    pub next: String,
    pub prev_max: Vec<f64>,
    pub next_max: Vec<f64>,
    /// Largest `|prev_max - next_max| / max(prev_max, next_max)` over the channels.
    pub max_relative_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqualizationReport {
    pub sweeps: usize,
    /// Mean `|s - 1|` of every sweep, in order.
    pub deviations: Vec<f64>,
    pub converged: bool,
    pub eps_stop: f64,
    pub pairs: Vec<PairReport>,
}

/// Adjacent `(prev, next)` block indices that can be equalized: `next` reads
/// only `prev`, and `prev` feeds only `next`. Residual additions never pair.
pub fn equalization_pairs(graph: &NetworkGraph) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, b) in graph.blocks.iter().enumerate() {
        if let (Combine::Single, [j]) = (b.combine, b.predecessors.as_slice()) {
            if graph.consumers(*j) == [i] {
                pairs.push((*j, i));
            }
        }
    }
    pairs
}

fn row_max(conv: &ConvSpec, c: usize) -> f64 {
    let per_row = conv.weight.len() / conv.out_channels();
    conv.weight.data()[c * per_row..(c + 1) * per_row]
        .iter()
        .fold(0.0f64, |m, &w| m.max((w as f64).abs()))
}

/// Flat start of every kernel slice reading input channel `c`.
fn column_slices(conv: &ConvSpec, c: usize) -> impl Iterator<Item = usize> + '_ {
    let cig = conv.in_per_group();
    let cog = conv.out_per_group();
    let [kh, kw] = conv.kernel();
    let taps = kh * kw;
    let g = c / cig;
    let cl = c % cig;
    (g * cog..(g + 1) * cog).map(move |o| (o * cig + cl) * taps)
}

fn column_max(conv: &ConvSpec, c: usize) -> f64 {
    let [kh, kw] = conv.kernel();
    let taps = kh * kw;
    let w = conv.weight.data();
    column_slices(conv, c)
        .flat_map(|start| w[start..start + taps].iter())
        .fold(0.0f64, |m, &v| m.max((v as f64).abs()))
}

fn pair_maxima(graph: &NetworkGraph, prev: usize, next: usize) -> (Vec<f64>, Vec<f64>) {
    let p = &graph.blocks[prev].conv;
    let n = &graph.blocks[next].conv;
    let channels = p.out_channels();
    (
        (0..channels).map(|c| row_max(p, c)).collect(),
        (0..channels).map(|c| column_max(n, c)).collect(),
    )
}

/// Equalizes every pair from [`equalization_pairs`], sweeping pairs in
/// topological order and channels ascending until the mean `|s - 1|` of a
/// sweep falls below `eps_stop` or the sweep cap is reached. A channel whose
/// maximum is zero on either side keeps `s = 1`.
pub fn afcle(graph: &mut NetworkGraph, config: &AfcleConfig) -> Result<EqualizationReport> {
    if graph.blocks.iter().any(|b| b.batchnorm.is_some()) {
        return Err(Error::InvalidArgument(
            "equalization runs after BatchNorm fusion".into(),
        ));
    }
    if config.max_sweeps == 0 || !(config.eps_stop > 0.0) {
        return Err(Error::InvalidArgument(
            "AFCLE needs max_sweeps >= 1 and eps_stop > 0".into(),
        ));
    }
    let pairs = equalization_pairs(graph);
    let mut deviations = Vec::new();
    let mut converged = pairs.is_empty();
    while !converged && deviations.len() < config.max_sweeps {
        let mut total = 0.0f64;
        let mut count = 0usize;
        for &(prev, next) in &pairs {
            for c in 0..graph.blocks[prev].out_channels() {
                let r = row_max(&graph.blocks[prev].conv, c);
                let q = column_max(&graph.blocks[next].conv, c);
                let s = if r > 0.0 && q > 0.0 { (r * q).sqrt() / r } else { 1.0 };
                total += (s - 1.0).abs();
                count += 1;
                if s != 1.0 {
                    apply_scale(graph, prev, next, c, s);
                }
            }
        }
        let dev = total / count.max(1) as f64;
        if !dev.is_finite() {
            return Err(Error::NonFinite("AFCLE scale factors".into()));
        }
        deviations.push(dev);
        converged = dev < config.eps_stop;
    }
    let pairs = pairs
        .iter()
        .map(|&(prev, next)| {
            let (prev_max, next_max) = pair_maxima(graph, prev, next);
            let max_relative_gap = prev_max
                .iter()
                .zip(&next_max)
                .map(|(&a, &b)| {
                    let m = a.max(b);
                    if m > 0.0 {
                        (a - b).abs() / m
                    } else {
                        0.0
                    }
                })
                .fold(0.0, f64::max);
            PairReport {
                prev: graph.blocks[prev].id.clone(),
                next: graph.blocks[next].id.clone(),
                prev_max,
                next_max,
                max_relative_gap,
            }
        })
        .collect();
    graph.validate()?;
    Ok(EqualizationReport {
        sweeps: deviations.len(),
        deviations,
        converged,
        eps_stop: config.eps_stop,
        pairs,
    })
}

fn apply_scale(graph: &mut NetworkGraph, prev: usize, next: usize, c: usize, s: f64) {
    {
        let p = &mut graph.blocks[prev];
        let per_row = p.conv.weight.len() / p.out_channels();
        for w in &mut p.conv.weight.data_mut()[c * per_row..(c + 1) * per_row] {
            *w = (*w as f64 * s) as f32;
        }
        let b = &mut p.conv.bias.data_mut()[c];
        *b = (*b as f64 * s) as f32;
        let v = &mut p.eq.v_out[c];
        *v = (*v as f64 / s) as f32;
    }
    let n = &mut graph.blocks[next];
    let [kh, kw] = n.conv.kernel();
    let taps = kh * kw;
    let starts: Vec<usize> = column_slices(&n.conv, c).collect();
    let w = n.conv.weight.data_mut();
    for start in starts {
        for x in &mut w[start..start + taps] {
            *x = (*x as f64 / s) as f32;
        }
    }
    let v = &mut n.eq.v_in[c];
    *v = (*v as f64 * s) as f32;
}
