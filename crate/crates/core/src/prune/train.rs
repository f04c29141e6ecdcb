use std::f64::consts::PI;
use std::time::Instant;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::{sigmoid, soft_threshold, str_backward, str_forward, str_sparsity};
use crate::datagen::{generate_with, GenSpec};
use crate::error::{Error, Result};
use crate::ir::{Block, ForwardMode, NetworkGraph, StrState};
use crate::precondition::{afcle, fold_buffers, fuse_batchnorm, AfcleConfig, EqualizationReport};
use crate::tensor::{conv2d_forward, conv2d_weight_grad, elementwise_scale, ConvSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub s0: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    /// Length of the cosine schedule; training stops at `iterations`.
    pub horizon: usize,
    pub seed: u64,
    /// Whether `s` also receives the loss gradient (not just the decay).
    pub loss_grad_to_s: bool,
    pub afcle: AfcleConfig,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            s0: -5.0,
            lambda: 0.000_015_517_578_13,
            iterations: 1000,
            batch: 128,
            lr: 0.001,
            horizon: 100_000,
            seed: 0,
            loss_grad_to_s: true,
            afcle: AfcleConfig::default(),
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        StrState::new(self.s0, self.lambda)?;
        if self.batch == 0 || self.horizon == 0 || !(self.lr >= 0.0) {
            return Err(Error::InvalidArgument(
                "pruning needs batch >= 1, horizon >= 1 and lr >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// `lr0 / 2 * (1 + cos(pi t / horizon))`, reaching 0 at the horizon.
pub fn cosine_lr(lr0: f64, t: usize, horizon: usize) -> f64 {
    let x = (t.min(horizon) as f64) / horizon as f64;
    0.5 * lr0 * (1.0 + (PI * x).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One bias-corrected update; `step` is the 1-based step number.
    #[inline]
    pub fn update(&self, param: &mut f64, grad: f64, m: &mut f64, v: &mut f64, step: u64, lr: f64) {
        *m = self.beta1 * *m + (1.0 - self.beta1) * grad;
        *v = self.beta2 * *v + (1.0 - self.beta2) * grad * grad;
        let mh = *m / (1.0 - self.beta1.powi(step as i32));
        let vh = *v / (1.0 - self.beta2.powi(step as i32));
        *param -= lr * mh / (vh.sqrt() + self.eps);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrainResult {
    pub block: String,
    /// MSE between student and teacher outputs on a held-out generated batch.
    pub final_loss: f64,
    pub sparsity: f64,
    pub s_initial: f64,
    pub s_final: f64,
    /// `(iteration, s)` samples.
    pub s_trajectory: Vec<(usize, f64)>,
    /// Training loss of every iteration.
    pub losses: Vec<f64>,
    pub millis: f64,
}

fn mse_and_grad(student: &Tensor, teacher: &Tensor, v_out: &[f64]) -> Result<(f64, Tensor)> {
    let n = student.len().max(1) as f64;
    let mut loss = 0.0;
    let diff: Vec<f64> = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    let g = Tensor::from_f64_slice(student.shape().to_vec(), &diff)?;
    Ok((loss / n, elementwise_scale(&g, v_out)?))
}

fn student_output(conv: &ConvSpec, w: &[f64], s: f64, x: &Tensor, v_out: &[f64]) -> Result<(Tensor, ConvSpec)> {
    let t = sigmoid(s);
    let ws: Vec<f32> = w.iter().map(|&v| soft_threshold(v, t) as f32).collect();
    let spec = ConvSpec {
        weight: Tensor::new(conv.weight.shape().to_vec(), ws)?,
        bias: conv.bias.clone(),
        stride: conv.stride,
        padding: conv.padding,
        groups: conv.groups,
    };
    let y = conv2d_forward(x, &spec)?;
    Ok((elementwise_scale(&y, v_out)?, spec))
}

/// Trains the student block's `(W, s)` to match the teacher block's buffered
/// output `(W x + b) * v_out` on fresh generated batches. The bias, the
/// buffers and the teacher are never modified.
pub fn train_layer(
    teacher: &Block,
    student: &mut Block,
    spec: &GenSpec,
    config: &PruneConfig,
) -> Result<LayerTrainResult> {
    config.validate()?;
    if teacher.conv.weight.shape() != student.conv.weight.shape() || teacher.eq != student.eq {
        return Err(Error::shape(
            format!("block '{}'", student.id),
            "teacher and student layers differ in structure",
        ));
    }
    let started = Instant::now();
    let mut state = match student.str_state {
        Some(st) => st,
        None => StrState::new(config.s0, config.lambda)?,
    };
    let s_initial = state.s;
    let v_out = student.eq.v_out_f64();
    let mut w: Vec<f64> = student.conv.weight.to_f64_vec();
    let mut mw = vec![0.0; w.len()];
    let mut vw = vec![0.0; w.len()];
    let adam = Adam::default();
    let mut rng = spec.rng();
    let sample_every = (config.iterations / 100).max(1);
    let mut s_trajectory = vec![(0, state.s)];
    let mut losses = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        let lr = cosine_lr(config.lr, it, config.horizon);
        let x = generate_with(spec, &mut rng)?;
        let target = teacher.layer_output(&x, ForwardMode::Float)?;
        let (y, sspec) = student_output(&student.conv, &w, state.s, &x, &v_out)?;
        let (loss, grad_out) = mse_and_grad(&y, &target, &v_out)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                block: student.id.clone(),
                iteration: it,
                lr,
                loss,
            });
        }
        losses.push(loss);
        let grad_ws = conv2d_weight_grad(&x, &sspec, &grad_out)?;
        let (gw, gs) = str_backward(&w, state.s, &grad_ws);
        let gs = if config.loss_grad_to_s { gs } else { 0.0 } + state.lambda * state.s;
        state.step += 1;
        let step = state.step;
        for ((p, g), (m, v)) in w.iter_mut().zip(&gw).zip(mw.iter_mut().zip(vw.iter_mut())) {
            adam.update(p, *g, m, v, step, lr);
        }
        adam.update(&mut state.s, gs, &mut state.m, &mut state.v, step, lr);
        if !state.s.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                block: student.id.clone(),
                iteration: it,
                lr,
                loss: f64::NAN,
            });
        }
        if (it + 1) % sample_every == 0 {
            s_trajectory.push((it + 1, state.s));
        }
    }

    student.conv.weight = Tensor::from_f64_slice(student.conv.weight.shape().to_vec(), &w)?;
    student.str_state = Some(state);
    let x = generate_with(spec, &mut rng)?;
    let target = teacher.layer_output(&x, ForwardMode::Float)?;
    let y = student.layer_output(&x, ForwardMode::Str)?;
    let (final_loss, _) = mse_and_grad(&y, &target, &v_out)?;
    let result = LayerTrainResult {
        block: student.id.clone(),
        final_loss,
        sparsity: str_sparsity(&student.conv.weight, state.s),
        s_initial,
        s_final: state.s,
        s_trajectory,
        losses,
        millis: started.elapsed().as_secs_f64() * 1e3,
    };
    debug!(
        "layer '{}': loss {:.3e}, sparsity {:.3}, s {:.3} -> {:.3}",
        result.block, result.final_loss, result.sparsity, s_initial, state.s
    );
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BakedLayer {
    pub block: String,
    pub weights: usize,
    pub zeros: usize,
    /// Keep-mask of `W_s` (bit set = kept), packed LSB-first and hex-encoded.
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub config: PruneConfig,
    pub equalization: EqualizationReport,
    pub layers: Vec<LayerTrainResult>,
    pub baked: Vec<BakedLayer>,
    /// Fraction of exactly-zero weights over all conv/linear layers.
    pub total_sparsity: f64,
    /// Mean of the layers' final losses.
    pub mean_loss: f64,
}

fn pack_mask(w: &Tensor) -> String {
    let mut bytes = vec![0u8; w.len().div_ceil(8)];
    for (i, &v) in w.data().iter().enumerate() {
        if v != 0.0 {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fuse, equalize, copy into teacher and student, train every layer of the
/// student independently, bake `W <- W_s` and fold the buffers.
pub fn prune_network(graph: &NetworkGraph, config: &PruneConfig) -> Result<(NetworkGraph, PruneReport)> {
    prune_network_in_order(graph, config, None)
}

/// As [`prune_network`], training the layers in the given order (layers are
/// independent, so the order does not change the result).
pub fn prune_network_in_order(
    graph: &NetworkGraph,
    config: &PruneConfig,
    order: Option<&[usize]>,
) -> Result<(NetworkGraph, PruneReport)> {
    config.validate()?;
    let mut teacher = graph.clone();
    fuse_batchnorm(&mut teacher)?;
    let equalization = afcle(&mut teacher, &config.afcle)?;
    let mut student = teacher.clone();
    let natural: Vec<usize> = (0..teacher.blocks.len()).collect();
    let order = order.unwrap_or(&natural);
    let mut layers: Vec<Option<LayerTrainResult>> = vec![None; teacher.blocks.len()];
    for &i in order {
        let spec = GenSpec::for_block(&teacher, i, config.batch, config.seed, "prune", false)?;
        student.blocks[i].str_state = Some(StrState::new(config.s0, config.lambda)?);
        let r = train_layer(&teacher.blocks[i], &mut student.blocks[i], &spec, config)?;
        info!(
            "pruned '{}': sparsity {:.3}, loss {:.3e}",
            r.block, r.sparsity, r.final_loss
        );
        layers[i] = Some(r);
    }
    let layers: Vec<LayerTrainResult> = layers
        .into_iter()
        .map(|r| r.ok_or_else(|| Error::InvalidArgument("training order must cover every layer".into())))
        .collect::<Result<_>>()?;
    let mut baked = Vec::with_capacity(student.blocks.len());
    for b in &mut student.blocks {
        if let Some(st) = b.str_state.take() {
            b.conv.weight = str_forward(&b.conv.weight, st.s);
        }
        baked.push(BakedLayer {
            block: b.id.clone(),
            weights: b.conv.weight.len(),
            zeros: b.conv.weight.data().iter().filter(|&&v| v == 0.0).count(),
            mask: pack_mask(&b.conv.weight),
        });
    }
    fold_buffers(&mut student);
    student.validate()?;
    let mean_loss = layers.iter().map(|l| l.final_loss).sum::<f64>() / layers.len().max(1) as f64;
    let report = PruneReport {
        config: *config,
        equalization,
        total_sparsity: student.sparsity(),
        mean_loss,
        layers,
        baked,
    };
    Ok((student, report))
}
