//! Simulated affine quantization.
//!
//! `Q(x) = round((clamp(x, l, h) - l) / k) * k + l` with `k = (h - l) / (2^b - 1)`,
//! rounding half away from zero. Weights use their per-tensor min/max;
//! activation ranges come from a grid search over generated data.

mod pipeline;

use log::warn;
use serde::{Deserialize, Serialize};

pub use pipeline::{
    quantize_pipeline, BiasCorrectionEntry, CalibrationDelta, CompressionReport, QuantConfig, QuantSite, SiteKind,
    StageEntry,
};

use crate::datagen::{generate, GenSpec};
use crate::error::{Error, Result};
use crate::ir::{NetworkGraph, QuantParams};
use crate::tensor::{ConvSpec, Scalar, Tensor};

/// Quantizes one value onto the grid of `q`.
#[inline]
pub fn quantize_value(x: f64, q: &QuantParams) -> f64 {
    let k = q.step();
    ((x.clamp(q.l, q.h) - q.l) / k).round() * k + q.l
}

#[inline]
fn grid_index(x: f64, l: f64, h: f64, k: f64) -> f64 {
    ((x.clamp(l, h) - l) / k).round()
}

pub fn affine_quantize<T: Scalar>(x: &Tensor<T>, q: &QuantParams) -> Result<Tensor<T>> {
    let q = QuantParams::new(q.l, q.h, q.bits)?;
    x.map(|v| T::from_f64(quantize_value(v.to_f64(), &q)))
        .check_finite("affine_quantize")
}

/// Per-tensor `(min W, max W)`. A constant tensor gets a tiny positive range
/// starting at its value, so it is represented exactly.
pub fn weight_range<T: Scalar>(w: &Tensor<T>, bits: u8) -> Result<QuantParams> {
    let (lo, hi) = w
        .min_max()
        .ok_or_else(|| Error::InvalidArgument("cannot set a range for an empty tensor".into()))?;
    if lo < hi {
        QuantParams::new(lo, hi, bits)
    } else {
        QuantParams::new(lo, lo + tiny_width(lo), bits)
    }
}

fn tiny_width(c: f64) -> f64 {
    (c.abs() * 1e-6).max(1e-12)
}

/// `sum (x - Q(x))^2` evaluated directly.
pub fn quantization_sse(x: &[f64], q: &QuantParams) -> f64 {
    x.iter().map(|&v| (v - quantize_value(v, q)).powi(2)).sum()
}

/// Result of the activation range search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeSearch {
    pub params: QuantParams,
    /// `||X - Q(X)||_2` at the chosen range.
    pub loss: f64,
    pub data_min: f64,
    pub data_max: f64,
}

/// Sorted samples with prefix sums, for scoring a range in time proportional
/// to the number of occupied grid cells.
struct SortedSamples {
    x: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl SortedSamples {
    fn new(data: &[f64]) -> Self {
        let mut x = data.to_vec();
        x.sort_by(f64::total_cmp);
        let mut s1 = Vec::with_capacity(x.len() + 1);
        let mut s2 = Vec::with_capacity(x.len() + 1);
        let (mut a, mut b) = (0.0f64, 0.0f64);
        s1.push(0.0);
        s2.push(0.0);
        for &v in &x {
            a += v;
            b += v * v;
            s1.push(a);
            s2.push(b);
        }
        SortedSamples { x, s1, s2 }
    }

    fn sse(&self, q: &QuantParams) -> f64 {
        let (l, h, k) = (q.l, q.h, q.step());
        let n = self.x.len();
        let mut total = 0.0;
        let mut p = 0;
        while p < n {
            let j = grid_index(self.x[p], l, h, k);
            let e = p + self.x[p..].partition_point(|&v| grid_index(v, l, h, k) <= j);
            let g = j * k + l;
            let cnt = (e - p) as f64;
            let sx = self.s1[e] - self.s1[p];
            let sxx = self.s2[e] - self.s2[p];
            total += (sxx - 2.0 * g * sx + g * g * cnt).max(0.0);
            p = e;
        }
        total
    }
}

/// Joint grid search over `h = (i / N) max(d_max, 0)` and `l = (j / N) min(d_min, 0)`,
/// `i, j` in `1..=N`, minimizing `||X - Q(X, l, h, b)||_2`. Exact ties go to the
/// wider range.
pub fn grid_search(x: &[f64], bits: u8, steps: usize) -> Result<RangeSearch> {
    if steps == 0 {
        return Err(Error::InvalidArgument("grid search needs at least one step".into()));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("grid search over an empty tensor".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("grid search input".into()));
    }
    let d_min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let d_max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (d_min.min(0.0), d_max.max(0.0));
    if lo == 0.0 && hi == 0.0 {
        warn!("activation grid search saw an all-zero tensor; using a tiny range");
        let params = QuantParams::new(0.0, tiny_width(0.0), bits)?;
        return Ok(RangeSearch {
            params,
            loss: 0.0,
            data_min: d_min,
            data_max: d_max,
        });
    }
    let levels = ((1u32 << bits) - 1) as f64;
    let n = x.len();
    let fast_cost = (levels + 1.0).min(n as f64) * ((n as f64).log2() + 2.0);
    let sorted = (fast_cost < n as f64).then(|| SortedSamples::new(x));
    let score = |q: &QuantParams| match &sorted {
        Some(s) => s.sse(q),
        None => quantization_sse(x, q),
    };

    let nf = steps as f64;
    let mut candidates = Vec::with_capacity(steps * steps);
    for hi_step in 1..=steps {
        let h = hi_step as f64 / nf * hi;
        for lo_step in 1..=steps {
            let l = lo_step as f64 / nf * lo;
            let q = QuantParams { l, h, bits };
            candidates.push((score(&q), q));
        }
    }
    let best_scored = candidates.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let slack = best_scored * 1e-9 + 1e-300;
    let mut best: Option<(f64, QuantParams)> = None;
    for (s, q) in candidates {
        if s > best_scored + slack {
            continue;
        }
        let exact = if sorted.is_some() { quantization_sse(x, &q) } else { s };
        let better = match &best {
            None => true,
            Some((b, bq)) => exact < *b || (exact == *b && q.h - q.l > bq.h - bq.l),
        };
        if better {
            best = Some((exact, q));
        }
    }
    let (sse, params) = best.expect("at least one candidate");
    Ok(RangeSearch {
        params,
        loss: sse.sqrt(),
        data_min: d_min,
        data_max: d_max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub bits: u8,
    pub grid_steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            bits: 8,
            grid_steps: 100,
            batch: 2000,
            seed: 0,
        }
    }
}

/// Activation calibration of one block plus the per-tap input means of the data it saw.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCalibration {
    pub search: RangeSearch,
    pub tap_means: Vec<f64>,
}

/// Generates the block's conv input (with activations) and grid-searches its range.
pub fn calibrate_activation(
    graph: &NetworkGraph,
    index: usize,
    config: &CalibrationConfig,
) -> Result<ActivationCalibration> {
    let spec = GenSpec::for_block(graph, index, config.batch, config.seed, "calibrate", true)?;
    let x = generate(&spec)?;
    let search = grid_search(&x.to_f64_vec(), config.bits, config.grid_steps)?;
    Ok(ActivationCalibration {
        search,
        tap_means: tap_means(&graph.blocks[index].conv, &x)?,
    })
}

/// Mean input value read by each kernel tap over the batch and all output
/// positions, with zero padding counted as 0. Laid out `[c_in, kh, kw]`.
pub fn tap_means(conv: &ConvSpec, x: &Tensor) -> Result<Vec<f64>> {
    let (n, c, h, w) = x.dims4("tap means")?;
    if c != conv.in_channels() {
        return Err(Error::shape(
            "tap means",
            format!("input has {c} channels, conv expects {}", conv.in_channels()),
        ));
    }
    let (oh, ow) = conv.output_hw(h, w)?;
    let [kh, kw] = conv.kernel();
    let plane = h * w;
    let mut sums = vec![0.0f64; c * plane];
    for b in 0..n {
        for ch in 0..c {
            let src = &x.data()[(b * c + ch) * plane..][..plane];
            for (s, &v) in sums[ch * plane..(ch + 1) * plane].iter_mut().zip(src) {
                *s += v as f64;
            }
        }
    }
    let positions = (n * oh * ow).max(1) as f64;
    let axis = |k: usize, o: usize, stride: usize, pad: usize, size: usize| -> Option<usize> {
        let p = (o * stride + k) as isize - pad as isize;
        (p >= 0 && (p as usize) < size).then_some(p as usize)
    };
    let mut out = vec![0.0f64; c * kh * kw];
    for ch in 0..c {
        let s = &sums[ch * plane..(ch + 1) * plane];
        for ky in 0..kh {
            for kx in 0..kw {
                let mut acc = 0.0;
                for oy in 0..oh {
                    let Some(iy) = axis(ky, oy, conv.stride[0], conv.padding[0], h) else {
                        continue;
                    };
                    for ox in 0..ow {
                        if let Some(ix) = axis(kx, ox, conv.stride[1], conv.padding[1], w) {
                            acc += s[iy * w + ix];
                        }
                    }
                }
                out[(ch * kh + ky) * kw + kx] = acc / positions;
            }
        }
    }
    Ok(out)
}

/// Expected output shift `(Q(W) - W) E[x]` per output channel, with `E[x]`
/// given per input channel and kernel tap (see [`tap_means`]).
pub fn expected_error(conv: &ConvSpec, quantized: &Tensor, means: &[f64]) -> Result<Vec<f64>> {
    let [kh, kw] = conv.kernel();
    let taps = kh * kw;
    if means.len() != conv.in_channels() * taps || quantized.shape() != conv.weight.shape() {
        return Err(Error::shape(
            "bias correction",
            "input means or quantized weight do not match the conv",
        ));
    }
    let cig = conv.in_per_group();
    let cog = conv.out_per_group();
    let (w, qw) = (conv.weight.data(), quantized.data());
    Ok((0..conv.out_channels())
        .map(|o| {
            let g = o / cog;
            let mut acc = 0.0;
            for cl in 0..cig {
                let m = &means[(g * cig + cl) * taps..][..taps];
                let start = (o * cig + cl) * taps;
                for t in 0..taps {
                    acc += (qw[start + t] as f64 - w[start + t] as f64) * m[t];
                }
            }
            acc
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(l: f64, h: f64, bits: u8) -> QuantParams {
        QuantParams::new(l, h, bits).unwrap()
    }

    #[test]
    fn small_grid_examples() {
        let x = Tensor::<f64>::from_f64_slice(vec![3], &[0.0, 0.51, 1.0]).unwrap();
        let y = affine_quantize(&x, &q(0.0, 1.0, 3)).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(y.data()[2], 1.0);
        assert_eq!(quantize_value(2.0, &q(0.0, 1.0, 8)), 1.0);
        assert_eq!(quantize_value(0.5, &q(0.0, 1.5, 2)), 0.5);
    }

    #[test]
    fn ties_round_away_from_zero() {
        // k = 1 on [0, 3]; 1.5 sits exactly between grid points 1 and 2.
        assert_eq!(quantize_value(1.5, &q(0.0, 3.0, 2)), 2.0);
        assert_eq!(quantize_value(0.5, &q(0.0, 3.0, 2)), 1.0);
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let x = Tensor::<f32>::zeros(vec![2]);
        let bad = QuantParams {
            l: 1.0,
            h: 1.0,
            bits: 8,
        };
        assert!(affine_quantize(&x, &bad).is_err());
        assert!(QuantParams::new(0.0, 1.0, 0).is_err());
        assert!(QuantParams::new(0.0, 1.0, 17).is_err());
    }

    #[test]
    fn weight_ranges() {
        let w = Tensor::<f32>::from_f64_slice(vec![4], &[-3.0, 0.5, 5.0, 1.0]).unwrap();
        let r = weight_range(&w, 8).unwrap();
        assert_eq!((r.l, r.h), (-3.0, 5.0));
        let c = Tensor::<f32>::filled(vec![5], 0.37);
        let r = weight_range(&c, 4).unwrap();
        assert_eq!(affine_quantize(&c, &r).unwrap(), c);
        let z = Tensor::<f32>::zeros(vec![3]);
        assert_eq!(affine_quantize(&z, &weight_range(&z, 2).unwrap()).unwrap(), z);
    }

    #[test]
    fn grid_search_constant_positive() {
        let r = grid_search(&[0.7; 50], 4, 100).unwrap();
        assert_eq!(r.params.l, 0.0);
        assert!((r.params.h - 0.7).abs() < 1e-15);
        assert_eq!(r.loss, 0.0);
    }

    #[test]
    fn grid_search_single_step() {
        let x = [-2.0, 0.3, 1.25, 4.0];
        let r = grid_search(&x, 3, 1).unwrap();
        assert_eq!((r.params.l, r.params.h), (-2.0, 4.0));
        let expected = quantization_sse(&x, &q(-2.0, 4.0, 3)).sqrt();
        assert_eq!(r.loss, expected);
    }

    #[test]
    fn all_zero_input_gets_tiny_range() {
        let r = grid_search(&[0.0; 10], 8, 10).unwrap();
        assert_eq!(r.params.l, 0.0);
        assert!(r.params.h > 0.0 && r.params.h < 1e-9);
        assert_eq!(r.loss, 0.0);
    }

    #[test]
    fn fast_scoring_matches_direct() {
        let x: Vec<f64> = (0..5000).map(|i| ((i * 7919) % 1000) as f64 / 137.0 - 2.5).collect();
        let s = SortedSamples::new(&x);
        for (l, h, b) in [(-2.5, 4.8, 3), (-1.0, 2.0, 4), (-0.3, 0.9, 2), (-2.5, 0.5, 5)] {
            let p = q(l, h, b);
            let a = s.sse(&p);
            let d = quantization_sse(&x, &p);
            assert!((a - d).abs() <= 1e-9 * d.max(1.0), "{a} vs {d}");
        }
    }

    #[test]
    fn tap_means_count_padding_as_zero() {
        let conv = ConvSpec::new(
            Tensor::<f32>::zeros(vec![1, 1, 3, 3]),
            Tensor::zeros(vec![1]),
            [1, 1],
            [1, 1],
            1,
        )
        .unwrap();
        let x = Tensor::<f32>::filled(vec![2, 1, 4, 4], 2.0);
        let m = tap_means(&conv, &x).unwrap();
        assert_eq!(m[4], 2.0);
        assert_eq!(m[0], 2.0 * 0.75 * 0.75);
        assert_eq!(m[1], 2.0 * 0.75);
    }

    #[test]
    fn scalar_bias_correction_shift() {
        let conv = ConvSpec::new(
            Tensor::<f32>::filled(vec![1, 1, 1, 1], 1.0),
            Tensor::zeros(vec![1]),
            [1, 1],
            [0, 0],
            1,
        )
        .unwrap();
        let qw = Tensor::filled(vec![1, 1, 1, 1], 0.9f32);
        let e = expected_error(&conv, &qw, &[2.0]).unwrap();
        assert!((e[0] + 0.2).abs() < 1e-6);
    }
}
