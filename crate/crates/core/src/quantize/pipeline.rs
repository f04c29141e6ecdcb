use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::{affine_quantize, calibrate_activation, expected_error, weight_range, CalibrationConfig};
use crate::error::{Error, Result};
use crate::ir::{NetworkGraph, QuantParams};
use crate::precondition::{
    afcle, bias_absorption, buffers_discardable, discard_buffers, fold_buffers, fuse_batchnorm, AbsorptionReport,
    AfcleConfig, EqualizationReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    pub grid_steps: usize,
    pub calib_batch: usize,
    pub seed: u64,
    pub bias_absorption: bool,
    pub afcle: AfcleConfig,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            bits: 8,
            grid_steps: 100,
            calib_batch: 2000,
            seed: 0,
            bias_absorption: true,
            afcle: AfcleConfig::default(),
        }
    }
}

impl QuantConfig {
    fn calibration(&self) -> CalibrationConfig {
        CalibrationConfig {
            bits: self.bits,
            grid_steps: self.grid_steps,
            batch: self.calib_batch,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteKind {
    Weight,
    Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSite {
    pub block: String,
    pub kind: SiteKind,
    pub l: f64,
    pub h: f64,
    pub bits: u8,
    /// `||X - Q(X)||_2` on the calibration data (or the weight tensor).
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDelta {
    pub block: String,
    pub dl: f64,
    pub dh: f64,
    pub dloss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCorrectionEntry {
    pub block: String,
    /// Amount added to each bias entry.
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: String,
    pub millis: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub config: QuantConfig,
    pub stages: Vec<StageEntry>,
    pub sites: Vec<QuantSite>,
    /// Second activation calibration minus the first, per block.
    pub calibration_deltas: Vec<CalibrationDelta>,
    pub bias_correction: Vec<BiasCorrectionEntry>,
    pub equalization: EqualizationReport,
    pub absorption: Option<AbsorptionReport>,
    /// "discarded" or "folded".
    pub buffers: String,
    /// Bias correction takes `E[x]` from the generated calibration batch.
    pub bias_correction_source: String,
}

struct StageLog(Vec<StageEntry>);

impl StageLog {
    fn run<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<(T, String)>) -> Result<T> {
        let t = Instant::now();
        let (out, detail) = f()?;
        info!("stage {stage}: {detail}");
        self.0.push(StageEntry {
            stage: stage.into(),
            millis: t.elapsed().as_secs_f64() * 1e3,
            detail,
        });
        Ok(out)
    }
}

fn site(graph: &NetworkGraph, i: usize, kind: SiteKind, q: &QuantParams, loss: f64) -> QuantSite {
    QuantSite {
        block: graph.blocks[i].id.clone(),
        kind,
        l: q.l,
        h: q.h,
        bits: q.bits,
        loss,
    }
}

type Round = Vec<(QuantParams, f64, Vec<f64>)>;

fn calibrate_all(graph: &mut NetworkGraph, cfg: &CalibrationConfig) -> Result<Round> {
    let mut out = Vec::with_capacity(graph.blocks.len());
    for i in 0..graph.blocks.len() {
        let c = calibrate_activation(graph, i, cfg)?;
        out.push((c.search.params, c.search.loss, c.tap_means));
    }
    for (b, (q, _, _)) in graph.blocks.iter_mut().zip(&out) {
        b.act_quant = Some(*q);
    }
    Ok(out)
}

/// Full data-free quantization: fusion, equalization, bias absorption,
/// activation calibration, bias correction, a second activation calibration,
/// buffer removal and weight ranges, in that order.
pub fn quantize_pipeline(graph: &NetworkGraph, config: &QuantConfig) -> Result<(NetworkGraph, CompressionReport)> {
    for b in &graph.blocks {
        if !b.activation.is_positively_homogeneous() {
            return Err(Error::UnsupportedActivation {
                block: b.id.clone(),
                activation: b.activation.name().to_string(),
                reason: "quantization supports ReLU networks only".into(),
            });
        }
    }
    QuantParams::new(0.0, 1.0, config.bits)?;
    let mut g = graph.clone();
    let mut log = StageLog(Vec::new());
    let cal = config.calibration();

    log.run("fuse", || {
        Ok(((), format!("{} BatchNorm layers fused", fuse_batchnorm(&mut g)?)))
    })?;
    let equalization = log.run("afcle", || {
        let r = afcle(&mut g, &config.afcle)?;
        let d = format!("{} sweeps, converged = {}", r.sweeps, r.converged);
        Ok((r, d))
    })?;
    let absorption = if config.bias_absorption {
        Some(log.run("bias_absorption", || {
            let r = bias_absorption(&mut g)?;
            let d = format!("{} blocks shifted", r.absorbed.len());
            Ok((r, d))
        })?)
    } else {
        None
    };
    let discard = buffers_discardable(&g);
    if !discard {
        log.run("fold_buffers", || {
            fold_buffers(&mut g);
            Ok(((), "buffers do not cancel pairwise; folded before calibration".into()))
        })?;
    }
    let first = log.run("calibrate_activations", || {
        let r = calibrate_all(&mut g, &cal)?;
        Ok((r, format!("{} activation sites", g.blocks.len())))
    })?;

    let bias_correction = log.run("bias_correction", || {
        let mut entries = Vec::new();
        for i in 0..g.blocks.len() {
            let b = &g.blocks[i];
            let wq = weight_range(&b.conv.weight, config.bits)?;
            let qw = affine_quantize(&b.conv.weight, &wq)?;
            let err = expected_error(&b.conv, &qw, &first[i].2)?;
            let b = &mut g.blocks[i];
            b.weight_quant = Some(wq);
            let mut delta = Vec::with_capacity(err.len());
            for (c, e) in err.iter().enumerate() {
                let old = b.conv.bias.data()[c];
                let new = (old as f64 - e) as f32;
                b.conv.bias.data_mut()[c] = new;
                delta.push(new as f64 - old as f64);
            }
            if let Some(st) = &mut b.stats {
                for (c, d) in delta.iter().enumerate() {
                    st.mean[c] = (st.mean[c] as f64 + d * b.eq.v_out[c] as f64) as f32;
                }
            }
            entries.push(BiasCorrectionEntry {
                block: b.id.clone(),
                delta,
            });
        }
        let n = entries.len();
        Ok((entries, format!("{n} biases corrected")))
    })?;

    let second = log.run("recalibrate_activations", || {
        let r = calibrate_all(&mut g, &cal)?;
        Ok((r, "activation ranges re-set after bias correction".into()))
    })?;
    let calibration_deltas: Vec<CalibrationDelta> = first
        .iter()
        .zip(&second)
        .zip(&g.blocks)
        .map(|(((a, la, _), (b, lb, _)), blk)| CalibrationDelta {
            block: blk.id.clone(),
            dl: b.l - a.l,
            dh: b.h - a.h,
            dloss: lb - la,
        })
        .collect();

    if discard {
        log.run("discard_buffers", || {
            discard_buffers(&mut g)?;
            Ok(((), "v_out buffers cancel against the next v_in; discarded".into()))
        })?;
    }
    let mut sites = Vec::new();
    log.run("weight_ranges", || {
        for i in 0..g.blocks.len() {
            let wq = weight_range(&g.blocks[i].conv.weight, config.bits)?;
            g.blocks[i].weight_quant = Some(wq);
            let w = &g.blocks[i].conv.weight;
            let qw = affine_quantize(w, &wq)?;
            let loss = w
                .data()
                .iter()
                .zip(qw.data())
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            let (aq, aloss, _) = &second[i];
            sites.push(site(&g, i, SiteKind::Activation, aq, *aloss));
            sites.push(site(&g, i, SiteKind::Weight, &wq, loss));
        }
        Ok(((), format!("{} weight sites", g.blocks.len())))
    })?;
    g.validate()?;
    let report = CompressionReport {
        config: *config,
        stages: log.0,
        sites,
        calibration_deltas,
        bias_correction,
        equalization,
        absorption,
        buffers: if discard { "discarded" } else { "folded" }.into(),
        bias_correction_source: "empirical mean of the generated calibration batch".into(),
    };
    Ok((g, report))
}
