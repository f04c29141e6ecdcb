//! Network intermediate representation.
//!
//! A [`NetworkGraph`] is a topologically ordered list of [`Block`]s. Each block
//! is `combine(predecessors) -> * v_in -> pool -> conv -> * v_out -> BatchNorm
//! -> activation`, where the pooling step and the BatchNorm are optional.
//! Fully-connected layers are 1x1 convolutions.

mod format;
mod forward;

use serde::{Deserialize, Serialize};

pub use format::{
    load_model, read_container, read_model, save_model, write_container, write_model, ContainerTensor, Dtype,
    FORMAT_VERSION, MODEL_MAGIC,
};
pub use forward::{ForwardMode, ForwardTrace};

use crate::error::{Error, FormatError, Result};
use crate::tensor::ConvSpec;

/// BatchNorm parameters: running mean/std and affine weight/bias.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f64,
}

impl BatchNormParams {
    pub fn identity(channels: usize, eps: f64) -> Self {
        BatchNormParams {
            mu: vec![0.0; channels],
            sigma: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    /// Per-channel multiplier `gamma / sqrt(sigma^2 + eps)`.
    pub fn scale(&self, c: usize) -> f64 {
        let s = self.sigma[c] as f64;
        self.gamma[c] as f64 / (s * s + self.eps).sqrt()
    }

    fn validate(&self, block: &str, channels: usize) -> Result<()> {
        let lens = [self.mu.len(), self.sigma.len(), self.gamma.len(), self.beta.len()];
        if lens.iter().any(|&l| l != channels) {
            return Err(Error::shape(
                format!("batchnorm of block '{block}'"),
                format!("vector lengths {lens:?} must all equal c_out = {channels}"),
            ));
        }
        if self.sigma.iter().any(|&s| s < 0.0) || self.eps.is_nan() || self.eps < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "batchnorm of block '{block}' has negative sigma or eps"
            )));
        }
        Ok(())
    }
}

/// Per-channel scale vectors recording equalization changes.
#[derive(Debug, Clone, PartialEq)]
pub struct EqBuffers {
    pub v_in: Vec<f32>,
    pub v_out: Vec<f32>,
}

impl EqBuffers {
    pub fn ones(c_in: usize, c_out: usize) -> Self {
        EqBuffers {
            v_in: vec![1.0; c_in],
            v_out: vec![1.0; c_out],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.v_in.iter().chain(&self.v_out).all(|&v| v == 1.0)
    }

    pub fn v_in_f64(&self) -> Vec<f64> {
        self.v_in.iter().map(|&v| v as f64).collect()
    }

    pub fn v_out_f64(&self) -> Vec<f64> {
        self.v_out.iter().map(|&v| v as f64).collect()
    }
}

/// Per-channel Gaussian summary of a block's pre-activation output, used by
/// data generation. Expressed in the block's buffered output coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    /// BatchNorm output statistics: mean `beta`, standard deviation `|gamma|`.
    pub fn from_batchnorm(bn: &BatchNormParams) -> Self {
        ChannelStats {
            mean: bn.beta.clone(),
            std: bn.gamma.iter().map(|g| g.abs()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Other(String),
}

impl Activation {
    pub fn name(&self) -> &str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
            Activation::Other(name) => name,
        }
    }

    /// `f(a * x) = a * f(x)` for `a > 0`.
    pub fn is_positively_homogeneous(&self) -> bool {
        matches!(self, Activation::Relu | Activation::Identity)
    }

    /// Evaluates the activation on one value. `None` for unknown kinds.
    pub fn apply(&self, x: f64) -> Option<f64> {
        Some(match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
            Activation::Other(name) => match name.as_str() {
                "relu6" => x.clamp(0.0, 6.0),
                "sigmoid" => 1.0 / (1.0 + (-x).exp()),
                "tanh" => x.tanh(),
                "silu" | "swish" => x / (1.0 + (-x).exp()),
                _ => return None,
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    Single,
    Add,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Avg { kernel: [usize; 2], stride: [usize; 2] },
    Global,
}

/// Affine quantization range `[l, h]` with `bits` bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub l: f64,
    pub h: f64,
    pub bits: u8,
}

impl QuantParams {
    pub fn new(l: f64, h: f64, bits: u8) -> Result<Self> {
        if !(1..=16).contains(&bits) {
            return Err(Error::InvalidArgument(format!("bits must be in [1, 16], got {bits}")));
        }
        if !(l < h) || !l.is_finite() || !h.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "quantization range needs l < h, got l = {l}, h = {h}"
            )));
        }
        Ok(QuantParams { l, h, bits })
    }

    /// Number of grid points minus one.
    pub fn levels(&self) -> f64 {
        ((1u32 << self.bits) - 1) as f64
    }

    /// Grid step `k_b = (h - l) / (2^b - 1)`.
    pub fn step(&self) -> f64 {
        (self.h - self.l) / self.levels()
    }
}

/// Soft-threshold sparsity parameter of one layer, with its Adam moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrState {
    pub s: f64,
    pub s0: f64,
    pub lambda: f64,
    #[serde(default)]
    pub m: f64,
    #[serde(default)]
    pub v: f64,
    #[serde(default)]
    pub step: u64,
}

impl StrState {
    pub fn new(s0: f64, lambda: f64) -> Result<Self> {
        if !(s0 < 0.0) || !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "STR needs s0 < 0 and lambda >= 0, got s0 = {s0}, lambda = {lambda}"
            )));
        }
        Ok(StrState {
            s: s0,
            s0,
            lambda,
            m: 0.0,
            v: 0.0,
            step: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub id: String,
    pub conv: ConvSpec<f32>,
    pub batchnorm: Option<BatchNormParams>,
    pub activation: Activation,
    pub eq: EqBuffers,
    /// Indices of earlier blocks whose outputs feed this one; empty means the network input.
    pub predecessors: Vec<usize>,
    pub combine: Combine,
    pub pool: Option<Pool>,
    pub stats: Option<ChannelStats>,
    pub weight_quant: Option<QuantParams>,
    /// Placed on the conv input, after the combine.
    pub act_quant: Option<QuantParams>,
    pub str_state: Option<StrState>,
}

impl Block {
    /// A plain block with identity buffers and no optional parts.
    pub fn new(id: impl Into<String>, conv: ConvSpec<f32>, activation: Activation, predecessors: Vec<usize>) -> Self {
        let combine = if predecessors.len() > 1 {
            Combine::Add
        } else {
            Combine::Single
        };
        let eq = EqBuffers::ones(conv.in_channels(), conv.out_channels());
        Block {
            id: id.into(),
            conv,
            batchnorm: None,
            activation,
            eq,
            predecessors,
            combine,
            pool: None,
            stats: None,
            weight_quant: None,
            act_quant: None,
            str_state: None,
        }
    }

    pub fn with_batchnorm(mut self, bn: BatchNormParams) -> Self {
        self.stats = Some(ChannelStats::from_batchnorm(&bn));
        self.batchnorm = Some(bn);
        self
    }

    pub fn with_pool(mut self, pool: Pool) -> Self {
        self.pool = Some(pool);
        self
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn parameter_count(&self) -> usize {
        self.conv.weight.len() + self.conv.bias.len() + self.batchnorm.as_ref().map_or(0, |b| 4 * b.channels())
    }

    /// Snapshots BatchNorm output statistics if none are recorded yet.
    pub fn snapshot_stats(&mut self) {
        if self.stats.is_none() {
            if let Some(bn) = &self.batchnorm {
                self.stats = Some(ChannelStats::from_batchnorm(bn));
            }
        }
    }
}

/// Shapes (C, H, W) flowing through one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShapes {
    /// After the combine, before pooling.
    pub combined: [usize; 3],
    /// Physical conv input (after pooling).
    pub conv_input: [usize; 3],
    pub output: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub blocks: Vec<Block>,
    /// Per-sample input shape (C, H, W).
    pub input_shape: [usize; 3],
    pub output: usize,
}

impl NetworkGraph {
    /// Builds and validates a graph; the output block is the unique sink.
    pub fn new(blocks: Vec<Block>, input_shape: [usize; 3]) -> Result<Self> {
        let sinks = sinks(&blocks);
        let output = match sinks.as_slice() {
            [one] => *one,
            _ => {
                return Err(
                    FormatError::NotDag(format!("expected exactly one output block, found {}", sinks.len())).into(),
                )
            }
        };
        let mut g = NetworkGraph {
            blocks,
            input_shape,
            output,
        };
        for b in &mut g.blocks {
            b.snapshot_stats();
        }
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, b) in self.blocks.iter().enumerate() {
            if !seen.insert(b.id.as_str()) {
                return Err(FormatError::Manifest(format!("duplicate block id '{}'", b.id)).into());
            }
            if b.predecessors.iter().any(|&p| p >= i) {
                return Err(FormatError::NotDag(format!(
                    "block '{}' reads from a block that does not precede it",
                    b.id
                ))
                .into());
            }
            match b.combine {
                Combine::Single if b.predecessors.len() > 1 => {
                    return Err(FormatError::Manifest(format!(
                        "block '{}' has {} predecessors but combine = single",
                        b.id,
                        b.predecessors.len()
                    ))
                    .into())
                }
                Combine::Add if b.predecessors.len() < 2 => {
                    return Err(FormatError::Manifest(format!(
                        "block '{}' uses combine = add with fewer than two predecessors",
                        b.id
                    ))
                    .into())
                }
                _ => {}
            }
            b.conv.validate().map_err(|e| e.in_block(&b.id))?;
            if b.eq.v_in.len() != b.in_channels() || b.eq.v_out.len() != b.out_channels() {
                return Err(Error::shape(
                    format!("block '{}'", b.id),
                    "equalization buffer lengths do not match the conv channels",
                ));
            }
            if b.eq
                .v_in
                .iter()
                .chain(&b.eq.v_out)
                .any(|&v| !(v > 0.0) || !v.is_finite())
            {
                return Err(Error::InvalidArgument(format!(
                    "block '{}' has non-positive equalization buffers",
                    b.id
                )));
            }
            if let Some(bn) = &b.batchnorm {
                bn.validate(&b.id, b.out_channels())?;
            }
            if let Some(st) = &b.stats {
                if st.mean.len() != b.out_channels() || st.std.len() != b.out_channels() {
                    return Err(Error::shape(format!("block '{}'", b.id), "stats length mismatch"));
                }
            }
        }
        if sinks(&self.blocks) != [self.output] {
            return Err(FormatError::NotDag("the output block must be the unique sink".into()).into());
        }
        self.shapes()?;
        Ok(())
    }

    pub fn block_index(&self, id: &str) -> Result<usize> {
        self.blocks
            .iter()
            .position(|b| b.id == id)
            .ok_or_else(|| Error::UnknownBlock(id.to_string()))
    }

    /// Blocks reading the output of block `i`.
    pub fn consumers(&self, i: usize) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.predecessors.contains(&i))
            .map(|(j, _)| j)
            .collect()
    }

    /// Per-block shapes, checking channel/spatial compatibility along the way.
    pub fn shapes(&self) -> Result<Vec<BlockShapes>> {
        let mut out: Vec<BlockShapes> = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let combined = if b.predecessors.is_empty() {
                self.input_shape
            } else {
                let first = out[b.predecessors[0]].output;
                for &p in &b.predecessors[1..] {
                    if out[p].output != first {
                        return Err(Error::shape(
                            format!("block '{}'", b.id),
                            format!("added inputs disagree: {:?} vs {:?}", first, out[p].output),
                        ));
                    }
                }
                first
            };
            let conv_input = match b.pool {
                None => combined,
                Some(Pool::Global) => [combined[0], 1, 1],
                Some(Pool::Avg { kernel, stride }) => {
                    if kernel[0] > combined[1] || kernel[1] > combined[2] || stride.contains(&0) || kernel.contains(&0)
                    {
                        return Err(Error::shape(format!("block '{}'", b.id), "pool window does not fit"));
                    }
                    [
                        combined[0],
                        (combined[1] - kernel[0]) / stride[0] + 1,
                        (combined[2] - kernel[1]) / stride[1] + 1,
                    ]
                }
            };
            if conv_input[0] != b.in_channels() {
                return Err(Error::shape(
                    format!("block '{}'", b.id),
                    format!(
                        "input has {} channels but the conv expects {}",
                        conv_input[0],
                        b.in_channels()
                    ),
                ));
            }
            let (oh, ow) = b
                .conv
                .output_hw(conv_input[1], conv_input[2])
                .map_err(|e| e.in_block(&b.id))?;
            out.push(BlockShapes {
                combined,
                conv_input,
                output: [b.out_channels(), oh, ow],
            });
        }
        Ok(out)
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(Block::parameter_count).sum()
    }

    /// Total number of conv/linear weights (the prunable set).
    pub fn weight_count(&self) -> usize {
        self.blocks.iter().map(|b| b.conv.weight.len()).sum()
    }

    /// Fraction of exactly-zero weights across all conv/linear layers.
    pub fn sparsity(&self) -> f64 {
        let zeros: usize = self
            .blocks
            .iter()
            .map(|b| b.conv.weight.data().iter().filter(|&&w| w == 0.0).count())
            .sum();
        zeros as f64 / self.weight_count().max(1) as f64
    }

    pub fn buffers_are_identity(&self) -> bool {
        self.blocks.iter().all(|b| b.eq.is_identity())
    }
}

fn sinks(blocks: &[Block]) -> Vec<usize> {
    (0..blocks.len())
        .filter(|&i| !blocks.iter().any(|b| b.predecessors.contains(&i)))
        .collect()
}
