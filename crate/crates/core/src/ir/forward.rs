use std::borrow::Cow;

use super::{Activation, Block, Combine, NetworkGraph, Pool};
use crate::error::{Error, Result};
use crate::prune::str_forward;
use crate::quantize::affine_quantize;
use crate::tensor::{add, avg_pool, conv2d_forward, elementwise_scale, ConvSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Float,
    /// Applies weight and activation quantizers where present.
    QuantSim,
    /// Replaces `W` by its soft-thresholded version where an STR state is present.
    Str,
}

/// Output plus the physical conv input of every block.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub output: Tensor,
    pub conv_inputs: Vec<Tensor>,
}

impl Block {
    /// The weight tensor the conv actually uses in `mode`.
    pub fn effective_weight(&self, mode: ForwardMode) -> Result<Cow<'_, Tensor>> {
        Ok(match mode {
            ForwardMode::Float => Cow::Borrowed(&self.conv.weight),
            ForwardMode::QuantSim => match &self.weight_quant {
                Some(q) => Cow::Owned(affine_quantize(&self.conv.weight, q)?),
                None => Cow::Borrowed(&self.conv.weight),
            },
            ForwardMode::Str => match &self.str_state {
                Some(st) => Cow::Owned(str_forward(&self.conv.weight, st.s)),
                None => Cow::Borrowed(&self.conv.weight),
            },
        })
    }

    /// `combined * v_in`, then pooling, then the activation quantizer in quant mode.
    pub fn conv_input(&self, combined: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        let x = elementwise_scale(combined, &self.eq.v_in_f64()).map_err(|e| e.in_block(&self.id))?;
        let x = match self.pool {
            None => x,
            Some(Pool::Global) => {
                let (_, _, h, w) = x.dims4("global pool")?;
                avg_pool(&x, [h, w], [1, 1])?
            }
            Some(Pool::Avg { kernel, stride }) => avg_pool(&x, kernel, stride).map_err(|e| e.in_block(&self.id))?,
        };
        match (mode, &self.act_quant) {
            (ForwardMode::QuantSim, Some(q)) => affine_quantize(&x, q),
            _ => Ok(x),
        }
    }

    /// Buffered layer output `(W x + b) * v_out`, before BatchNorm/activation.
    pub fn layer_output(&self, conv_input: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        let weight = self.effective_weight(mode)?;
        let y = match weight {
            Cow::Borrowed(_) => conv2d_forward(conv_input, &self.conv),
            Cow::Owned(w) => {
                let spec = ConvSpec {
                    weight: w,
                    bias: self.conv.bias.clone(),
                    stride: self.conv.stride,
                    padding: self.conv.padding,
                    groups: self.conv.groups,
                };
                conv2d_forward(conv_input, &spec)
            }
        }
        .map_err(|e| e.in_block(&self.id))?;
        elementwise_scale(&y, &self.eq.v_out_f64())
    }

    /// BatchNorm (if still unfused) followed by the activation.
    pub fn finish(&self, mut y: Tensor) -> Result<Tensor> {
        let (n, c, h, w) = y.dims4("block output")?;
        let plane = h * w;
        if let Some(bn) = &self.batchnorm {
            for b in 0..n {
                for ch in 0..c {
                    let scale = bn.scale(ch);
                    let mu = bn.mu[ch] as f64;
                    let beta = bn.beta[ch] as f64;
                    let start = (b * c + ch) * plane;
                    for v in &mut y.data_mut()[start..start + plane] {
                        *v = ((*v as f64 - mu) * scale + beta) as f32;
                    }
                }
            }
        }
        match &self.activation {
            Activation::Identity => Ok(y),
            act => {
                if act.apply(0.0).is_none() {
                    return Err(Error::UnsupportedActivation {
                        block: self.id.clone(),
                        activation: act.name().to_string(),
                        reason: "no evaluator for this activation".into(),
                    });
                }
                y.map(|v| act.apply(v as f64).unwrap_or(0.0) as f32)
                    .check_finite("activation")
            }
        }
    }
}

impl NetworkGraph {
    pub fn forward(&self, input: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        self.run(input, mode, false).map(|t| t.output)
    }

    /// Like [`Self::forward`] but also returns each block's physical conv input.
    pub fn forward_trace(&self, input: &Tensor, mode: ForwardMode) -> Result<ForwardTrace> {
        self.run(input, mode, true)
    }

    /// Logits as `[n, classes]` rows.
    pub fn logits(&self, input: &Tensor, mode: ForwardMode) -> Result<Vec<Vec<f32>>> {
        let y = self.forward(input, mode)?;
        let (n, c, h, w) = y.dims4("logits")?;
        let per = c * h * w;
        Ok((0..n).map(|b| y.data()[b * per..(b + 1) * per].to_vec()).collect())
    }

    fn run(&self, input: &Tensor, mode: ForwardMode, capture: bool) -> Result<ForwardTrace> {
        let (_, c, h, w) = input.dims4("network input")?;
        if [c, h, w] != self.input_shape {
            return Err(Error::shape(
                "network input",
                format!("expected per-sample shape {:?}, got {:?}", self.input_shape, [c, h, w]),
            ));
        }
        let mut outputs: Vec<Option<Tensor>> = vec![None; self.blocks.len()];
        let mut remaining: Vec<usize> = (0..self.blocks.len()).map(|i| self.consumers(i).len()).collect();
        let mut conv_inputs = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let combined = match (b.combine, b.predecessors.as_slice()) {
                (_, []) => Cow::Borrowed(input),
                (Combine::Single, [p]) => Cow::Borrowed(outputs[*p].as_ref().expect("topological order")),
                (_, preds) => {
                    let mut acc = outputs[preds[0]].clone().expect("topological order");
                    for &p in &preds[1..] {
                        acc = add(&acc, outputs[p].as_ref().expect("topological order"))
                            .map_err(|e| e.in_block(&b.id))?;
                    }
                    Cow::Owned(acc)
                }
            };
            let x = b.conv_input(&combined, mode)?;
            drop(combined);
            let y = b.finish(b.layer_output(&x, mode)?)?;
            if capture {
                conv_inputs.push(x);
            }
            for &p in &b.predecessors {
                remaining[p] -= 1;
                if remaining[p] == 0 {
                    outputs[p] = None;
                }
            }
            outputs[i] = Some(y);
        }
        let output = outputs[self.output].take().expect("output block evaluated");
        Ok(ForwardTrace { output, conv_inputs })
    }
}
