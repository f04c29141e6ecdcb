//! Function-preserving weight preconditioning: BatchNorm fusion,
//! buffer-recorded cross-layer equalization, bias absorption and the final
//! buffer fold-back.

mod afcle;

use log::warn;
use serde::{Deserialize, Serialize};

pub use afcle::{afcle, equalization_pairs, AfcleConfig, EqualizationReport, PairReport};

use crate::error::{Error, Result};
use crate::ir::{Activation, NetworkGraph};
use crate::tensor::ConvSpec;

/// Folds every BatchNorm into its conv: `W'_c = W_c * g_c`, `b'_c = (b_c - mu_c) * g_c + beta_c`
/// with `g_c = gamma_c / sqrt(sigma_c^2 + eps)`. Snapshotted statistics are left untouched.
pub fn fuse_batchnorm(graph: &mut NetworkGraph) -> Result<usize> {
    let mut fused = 0;
    for block in &mut graph.blocks {
        let Some(bn) = block.batchnorm.take() else {
            continue;
        };
        if bn.channels() != block.out_channels() {
            return Err(Error::shape(
                format!("block '{}'", block.id),
                "BatchNorm does not match the preceding conv",
            ));
        }
        let per_row = block.conv.weight.len() / block.out_channels().max(1);
        let v_out = block.eq.v_out.clone();
        for c in 0..bn.channels() {
            let g = bn.scale(c);
            let v = v_out[c] as f64;
            for w in &mut block.conv.weight.data_mut()[c * per_row..(c + 1) * per_row] {
                *w = (*w as f64 * g) as f32;
            }
            let b = &mut block.conv.bias.data_mut()[c];
            *b = ((*b as f64 - bn.mu[c] as f64 / v) * g + bn.beta[c] as f64 / v) as f32;
        }
        fused += 1;
    }
    graph.validate()?;
    Ok(fused)
}

/// Input channels of `conv` read by output row `o`, as `(global channel, local column)`.
pub(crate) fn row_inputs(conv: &ConvSpec, o: usize) -> impl Iterator<Item = (usize, usize)> {
    let cig = conv.in_per_group();
    let g = o / conv.out_per_group();
    (0..cig).map(move |cl| (g * cig + cl, cl))
}

/// `W <- diag(v_out) W diag(v_in)`, `b <- b * v_out`, buffers reset to 1.
pub fn fold_buffers(graph: &mut NetworkGraph) {
    for block in &mut graph.blocks {
        if block.eq.is_identity() {
            continue;
        }
        let [kh, kw] = block.conv.kernel();
        let taps = kh * kw;
        let cig = block.conv.in_per_group();
        let (v_in, v_out) = (block.eq.v_in_f64(), block.eq.v_out_f64());
        for o in 0..block.out_channels() {
            let inputs: Vec<_> = row_inputs(&block.conv, o).collect();
            let w = block.conv.weight.data_mut();
            for (c, cl) in inputs {
                let f = v_out[o] * v_in[c];
                let start = (o * cig + cl) * taps;
                for x in &mut w[start..start + taps] {
                    *x = (*x as f64 * f) as f32;
                }
            }
            let b = &mut block.conv.bias.data_mut()[o];
            *b = (*b as f64 * v_out[o]) as f32;
        }
        block
            .eq
            .v_in
            .iter_mut()
            .chain(block.eq.v_out.iter_mut())
            .for_each(|v| *v = 1.0);
    }
}

fn close_to_one(x: f64) -> bool {
    (x - 1.0).abs() <= 1e-5
}

/// Whether the buffers can be dropped without folding: every block output
/// feeds consumers whose `v_in` exactly undoes its `v_out`, all remaining
/// buffers are 1, BatchNorm is fused and activations are positively homogeneous.
pub fn buffers_discardable(graph: &NetworkGraph) -> bool {
    for (j, b) in graph.blocks.iter().enumerate() {
        if b.batchnorm.is_some() && !b.eq.v_out.iter().all(|&v| v == 1.0) {
            return false;
        }
        if !b.eq.v_out.iter().all(|&v| v == 1.0) && !b.activation.is_positively_homogeneous() {
            return false;
        }
        let consumers = graph.consumers(j);
        if consumers.is_empty() && !b.eq.v_out.iter().all(|&v| close_to_one(v as f64)) {
            return false;
        }
        for &i in &consumers {
            let next = &graph.blocks[i];
            let ok =
                b.eq.v_out
                    .iter()
                    .zip(&next.eq.v_in)
                    .all(|(&o, &n)| close_to_one(o as f64 * n as f64));
            if !ok {
                return false;
            }
        }
        if b.predecessors.is_empty() && !b.eq.v_in.iter().all(|&v| close_to_one(v as f64)) {
            return false;
        }
    }
    true
}

/// Drops the buffers while keeping the (equalized) weights. Each block's
/// output is then `1 / v_out` times what it was, which the consumer's `v_in`
/// used to apply anyway; snapshotted statistics are rescaled to match.
pub fn discard_buffers(graph: &mut NetworkGraph) -> Result<()> {
    if !buffers_discardable(graph) {
        return Err(Error::InvalidArgument(
            "equalization buffers do not cancel pairwise; fold them instead".into(),
        ));
    }
    for block in &mut graph.blocks {
        if let Some(st) = &mut block.stats {
            for (c, &v) in block.eq.v_out.iter().enumerate() {
                st.mean[c] = (st.mean[c] as f64 / v as f64) as f32;
                st.std[c] = (st.std[c] as f64 / v as f64) as f32;
            }
        }
        block
            .eq
            .v_in
            .iter_mut()
            .chain(block.eq.v_out.iter_mut())
            .for_each(|v| *v = 1.0);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionEntry {
    pub block: String,
    /// Per-channel shift removed from the block's output.
    pub shift: Vec<f64>,
    pub consumers: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionReport {
    pub absorbed: Vec<AbsorptionEntry>,
    pub skipped: Vec<String>,
    /// Statistics are read in output coordinates, i.e. after the block's `v_out` buffer.
    pub statistics_basis: String,
}

/// Moves the always-active part `c = max(0, mu - 3 sigma)` of every ReLU
/// output into the consumers' biases: `b_j -= c / v_out_j` and
/// `b_i += W_i (c * v_in_i)` summed over kernel taps. Exact wherever the
/// pre-activation stays above `c` and no zero padding touches the shifted channel.
pub fn bias_absorption(graph: &mut NetworkGraph) -> Result<AbsorptionReport> {
    let mut report = AbsorptionReport {
        statistics_basis: "buffered block output".into(),
        ..Default::default()
    };
    for j in 0..graph.blocks.len() {
        let consumers = graph.consumers(j);
        let block = &graph.blocks[j];
        if consumers.is_empty() {
            continue;
        }
        if block.activation != Activation::Relu {
            warn!(
                "bias absorption skips block '{}': activation '{}' is not ReLU",
                block.id,
                block.activation.name()
            );
            report.skipped.push(block.id.clone());
            continue;
        }
        if block.batchnorm.is_some() {
            return Err(Error::InvalidArgument(format!(
                "bias absorption needs fused BatchNorm (block '{}')",
                block.id
            )));
        }
        let Some(stats) = &block.stats else {
            report.skipped.push(block.id.clone());
            continue;
        };
        let shift: Vec<f64> = stats
            .mean
            .iter()
            .zip(&stats.std)
            .map(|(&m, &s)| (m as f64 - 3.0 * s as f64).max(0.0))
            .collect();
        if shift.iter().all(|&c| c == 0.0) {
            continue;
        }
        let block = &mut graph.blocks[j];
        for (c, &sh) in shift.iter().enumerate() {
            let v = block.eq.v_out[c] as f64;
            let b = &mut block.conv.bias.data_mut()[c];
            *b = (*b as f64 - sh / v) as f32;
        }
        let st = block.stats.as_mut().expect("checked above");
        for (m, &sh) in st.mean.iter_mut().zip(&shift) {
            *m = (*m as f64 - sh) as f32;
        }
        for &i in &consumers {
            let next = &mut graph.blocks[i];
            let [kh, kw] = next.conv.kernel();
            let taps = kh * kw;
            let cig = next.conv.in_per_group();
            let v_in = next.eq.v_in_f64();
            for o in 0..next.out_channels() {
                let mut delta = 0.0f64;
                for (c, cl) in row_inputs(&next.conv, o) {
                    if shift[c] == 0.0 {
                        continue;
                    }
                    let start = (o * cig + cl) * taps;
                    let wsum: f64 = next.conv.weight.data()[start..start + taps]
                        .iter()
                        .map(|&w| w as f64)
                        .sum();
                    delta += wsum * shift[c] * v_in[c];
                }
                let b = &mut next.conv.bias.data_mut()[o];
                *b = (*b as f64 + delta) as f32;
            }
        }
        report.absorbed.push(AbsorptionEntry {
            block: graph.blocks[j].id.clone(),
            shift,
            consumers: consumers.iter().map(|&i| graph.blocks[i].id.clone()).collect(),
        });
    }
    Ok(report)
}
