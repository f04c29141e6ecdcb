//! Layer-wise synthetic inputs sampled from BatchNorm output statistics.
//!
//! The input of block `i` is modelled as `sum_j f_j(N(mu_j, sigma_j))` over
//! its predecessors `j`, with `(mu_j, sigma_j)` the snapshotted BatchNorm
//! output statistics of `j`, scaled into the physical coordinates of the
//! consumer's conv input by its `v_in` buffer. Blocks reading the network
//! input get `N(0, 1)`.

use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ir::{Activation, ChannelStats, NetworkGraph};
use crate::seed::stream_rng;
use crate::tensor::Tensor;

/// Distribution of one predecessor's contribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub activation: Activation,
}

impl SourceStats {
    pub fn standard_normal(channels: usize) -> Self {
        SourceStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            activation: Activation::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub block: String,
    /// Empty for blocks reading the network input.
    pub sources: Vec<SourceStats>,
    /// Per-channel multiplier applied after summation (the consumer's `v_in`).
    pub scale: Vec<f64>,
    /// Per-sample shape (C, H, W) of the generated tensor.
    pub shape: [usize; 3],
    pub batch: usize,
    pub seed: u64,
    /// Stream tag mixed into the seed, so different consumers of one block draw independent data.
    pub stream: String,
    pub include_activations: bool,
}

impl GenSpec {
    /// Spec for the conv input of block `index`, read from the graph's snapshotted statistics.
    pub fn for_block(
        graph: &NetworkGraph,
        index: usize,
        batch: usize,
        seed: u64,
        stream: &str,
        include_activations: bool,
    ) -> Result<Self> {
        let shapes = graph.shapes()?;
        let block = &graph.blocks[index];
        let shape = shapes[index].conv_input;
        let mut sources = Vec::with_capacity(block.predecessors.len());
        for &p in &block.predecessors {
            let pred = &graph.blocks[p];
            let source = match &pred.stats {
                Some(st) => SourceStats {
                    mean: st.mean.iter().map(|&v| v as f64).collect(),
                    std: st.std.iter().map(|&v| v as f64).collect(),
                    activation: pred.activation.clone(),
                },
                None => {
                    warn!(
                        "block '{}' has no BatchNorm statistics; inputs to '{}' fall back to N(0, 1)",
                        pred.id, block.id
                    );
                    SourceStats {
                        activation: pred.activation.clone(),
                        ..SourceStats::standard_normal(pred.out_channels())
                    }
                }
            };
            sources.push(source);
        }
        Ok(GenSpec {
            block: block.id.clone(),
            sources,
            scale: block.eq.v_in_f64(),
            shape,
            batch,
            seed,
            stream: stream.to_string(),
            include_activations,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.shape[0];
        if self.batch == 0 {
            return Err(Error::InvalidArgument("datagen batch size must be at least 1".into()));
        }
        if self.scale.len() != c {
            return Err(Error::shape(
                format!("datagen for '{}'", self.block),
                format!("{} scale entries for {c} channels", self.scale.len()),
            ));
        }
        for s in &self.sources {
            if s.mean.len() != c || s.std.len() != c {
                return Err(Error::shape(
                    format!("datagen for '{}'", self.block),
                    format!(
                        "predecessor statistics have {}/{} channels, the block expects {c}",
                        s.mean.len(),
                        s.std.len()
                    ),
                ));
            }
            if s.std.iter().any(|&v| !(v >= 0.0)) || s.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "datagen for '{}': statistics must be finite with sigma >= 0",
                    self.block
                )));
            }
        }
        Ok(())
    }

    /// The RNG stream this spec draws from.
    pub fn rng(&self) -> ChaCha8Rng {
        stream_rng(self.seed, &self.block, &self.stream)
    }
}

/// Draws one batch using the spec's own seeded stream.
pub fn generate(spec: &GenSpec) -> Result<Tensor> {
    generate_with(spec, &mut spec.rng())
}

/// Draws one batch from a caller-owned stream (successive calls give fresh batches).
pub fn generate_with(spec: &GenSpec, rng: &mut impl Rng) -> Result<Tensor> {
    spec.validate()?;
    let [c, h, w] = spec.shape;
    let plane = h * w;
    let mut acc = vec![0.0f64; spec.batch * c * plane];
    let standard;
    let sources: &[SourceStats] = if spec.sources.is_empty() {
        standard = [SourceStats::standard_normal(c)];
        &standard
    } else {
        &spec.sources
    };
    for src in sources {
        for b in 0..spec.batch {
            for ch in 0..c {
                let (mu, sd) = (src.mean[ch], src.std[ch]);
                let start = (b * c + ch) * plane;
                for v in &mut acc[start..start + plane] {
                    let z: f64 = rng.sample(StandardNormal);
                    let x = mu + sd * z;
                    *v += if spec.include_activations {
                        src.activation.apply(x).ok_or_else(|| Error::UnsupportedActivation {
                            block: spec.block.clone(),
                            activation: src.activation.name().to_string(),
                            reason: "data generation cannot evaluate it".into(),
                        })?
                    } else {
                        x
                    };
                }
            }
        }
    }
    let data = acc
        .chunks(plane)
        .enumerate()
        .flat_map(|(i, chunk)| {
            let s = spec.scale[i % c];
            chunk.iter().map(move |&v| (v * s) as f32)
        })
        .collect();
    Tensor::new(vec![spec.batch, c, h, w], data)?.check_finite("datagen")
}

/// Statistics of the sum of two independent Gaussians: `(mu1 + mu2, sqrt(s1^2 + s2^2))`.
pub fn combined_stats(a: &ChannelStats, b: &ChannelStats) -> Result<ChannelStats> {
    if a.mean.len() != b.mean.len() || a.std.len() != b.std.len() || a.mean.len() != a.std.len() {
        return Err(Error::shape(
            "combined_stats",
            format!("{} vs {} channels", a.mean.len(), b.mean.len()),
        ));
    }
    Ok(ChannelStats {
        mean: a
            .mean
            .iter()
            .zip(&b.mean)
            .map(|(x, y)| (*x as f64 + *y as f64) as f32)
            .collect(),
        std: a
            .std
            .iter()
            .zip(&b.std)
            .map(|(x, y)| (*x as f64).hypot(*y as f64) as f32)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sources: Vec<SourceStats>, c: usize, batch: usize, act: bool) -> GenSpec {
        GenSpec {
            block: "b".into(),
            sources,
            scale: vec![1.0; c],
            shape: [c, 1, 1],
            batch,
            seed: 1,
            stream: "test".into(),
            include_activations: act,
        }
    }

    fn moments(x: &[f32]) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
        (m, var.sqrt())
    }

    #[test]
    fn first_layer_is_standard_normal() {
        let x = generate(&spec(vec![], 1, 100_000, true)).unwrap();
        let (m, s) = moments(x.data());
        assert!(m.abs() < 0.02, "mean {m}");
        assert!((s - 1.0).abs() < 0.02, "std {s}");
    }

    #[test]
    fn rectified_gaussian_moments() {
        let src = SourceStats {
            activation: Activation::Relu,
            ..SourceStats::standard_normal(1)
        };
        let x = generate(&spec(vec![src], 1, 100_000, true)).unwrap();
        let (m, s) = moments(x.data());
        let pi = std::f64::consts::PI;
        let em = 1.0 / (2.0 * pi).sqrt();
        let es = (0.5 - 1.0 / (2.0 * pi)).sqrt();
        assert!((m - em).abs() / em < 0.02, "mean {m} vs {em}");
        assert!((s - es).abs() / es < 0.02, "std {s} vs {es}");
    }

    #[test]
    fn degenerate_sigma_sums_means() {
        let a = SourceStats {
            mean: vec![1.0],
            std: vec![0.0],
            activation: Activation::Relu,
        };
        let b = SourceStats {
            mean: vec![2.0],
            ..a.clone()
        };
        let x = generate(&spec(vec![a, b], 1, 50, false)).unwrap();
        assert!(x.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn scale_and_determinism() {
        let mut s = spec(vec![], 2, 64, false);
        let a = generate(&s).unwrap();
        assert_eq!(a, generate(&s).unwrap());
        s.scale = vec![2.0, 1.0];
        let b = generate(&s).unwrap();
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            let k = if i % 2 == 0 { 2.0 } else { 1.0 };
            assert_eq!(*y, x * k);
        }
        s.stream = "other".into();
        assert_ne!(generate(&s).unwrap(), b);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let s = spec(vec![SourceStats::standard_normal(3)], 2, 4, false);
        assert!(matches!(generate(&s), Err(Error::Shape { .. })));
    }

    #[test]
    fn combined_stats_formula() {
        let a = ChannelStats {
            mean: vec![1.0, 4.0],
            std: vec![3.0, 2.0],
        };
        let b = ChannelStats {
            mean: vec![2.0, -1.0],
            std: vec![4.0, 0.0],
        };
        let c = combined_stats(&a, &b).unwrap();
        assert_eq!(c.mean, vec![3.0, 3.0]);
        assert_eq!(c.std, vec![5.0, 2.0]);
        let short = ChannelStats {
            mean: vec![0.0],
            std: vec![1.0],
        };
        assert!(combined_stats(&a, &short).is_err());
    }
}
