//! Small random networks for tests, benchmarks and examples.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ir::{Activation, BatchNormParams, Block, NetworkGraph, Pool};
use crate::tensor::{ConvSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    Chain,
    Residual,
    Depthwise,
}

impl Topology {
    pub const ALL: [Topology; 3] = [Topology::Chain, Topology::Residual, Topology::Depthwise];

    pub fn name(self) -> &'static str {
        match self {
            Topology::Chain => "chain",
            Topology::Residual => "residual",
            Topology::Depthwise => "depthwise",
        }
    }
}

struct Builder {
    rng: ChaCha8Rng,
    blocks: Vec<Block>,
}

impl Builder {
    fn normal(&mut self, n: usize, std: f64) -> Vec<f32> {
        (0..n)
            .map(|_| (self.rng.sample::<f64, _>(StandardNormal) * std) as f32)
            .collect()
    }

    fn conv(&mut self, c_in: usize, c_out: usize, k: usize, stride: usize, groups: usize) -> ConvSpec {
        let fan_in = c_in / groups * k * k;
        let w = self.normal(c_out * fan_in, (2.0 / fan_in as f64).sqrt());
        let b = self.normal(c_out, 0.1);
        ConvSpec::new(
            Tensor::new(vec![c_out, c_in / groups, k, k], w).expect("shape"),
            Tensor::new(vec![c_out], b).expect("shape"),
            [stride, stride],
            [k / 2, k / 2],
            groups,
        )
        .expect("valid conv")
    }

    fn batchnorm(&mut self, c: usize) -> BatchNormParams {
        BatchNormParams {
            mu: self.normal(c, 0.5),
            sigma: (0..c).map(|_| self.rng.random_range(0.5f32..2.0)).collect(),
            gamma: (0..c).map(|_| self.rng.random_range(0.5f32..1.5)).collect(),
            beta: self.normal(c, 0.5),
            eps: 1e-5,
        }
    }

    fn push(&mut self, id: &str, conv: ConvSpec, preds: Vec<usize>) -> usize {
        let c = conv.out_channels();
        let bn = self.batchnorm(c);
        self.blocks
            .push(Block::new(id, conv, Activation::Relu, preds).with_batchnorm(bn));
        self.blocks.len() - 1
    }

    fn head(&mut self, c_in: usize, classes: usize, pred: usize) {
        let w = self.normal(classes * c_in, (1.0 / c_in as f64).sqrt());
        let b = self.normal(classes, 0.1);
        let conv = ConvSpec::linear(
            Tensor::new(vec![classes, c_in], w).expect("shape"),
            Tensor::new(vec![classes], b).expect("shape"),
        )
        .expect("valid linear");
        self.blocks
            .push(Block::new("head", conv, Activation::Identity, vec![pred]).with_pool(Pool::Global));
    }
}

/// Per-sample input shape of every toy network.
pub const TOY_INPUT: [usize; 3] = [3, 8, 8];
pub const TOY_CLASSES: usize = 4;

/// A random network with BatchNorm + ReLU on every hidden block and a
/// global-pool linear head.
pub fn toy_network(topology: Topology, seed: u64) -> NetworkGraph {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        blocks: Vec::new(),
    };
    let last = match topology {
        Topology::Chain => {
            let c = b.conv(3, 8, 3, 1, 1);
            let b0 = b.push("conv0", c, vec![]);
            let c = b.conv(8, 8, 3, 2, 1);
            let b1 = b.push("conv1", c, vec![b0]);
            let c = b.conv(8, 6, 1, 1, 1);
            (b.push("conv2", c, vec![b1]), 6)
        }
        Topology::Residual => {
            let c = b.conv(3, 8, 3, 1, 1);
            let b0 = b.push("stem", c, vec![]);
            let c = b.conv(8, 8, 3, 1, 1);
            let b1 = b.push("res_a", c, vec![b0]);
            let c = b.conv(8, 8, 3, 1, 1);
            let b2 = b.push("res_b", c, vec![b1]);
            let c = b.conv(8, 8, 3, 2, 1);
            (b.push("merge", c, vec![b0, b2]), 8)
        }
        Topology::Depthwise => {
            let c = b.conv(3, 8, 3, 1, 1);
            let b0 = b.push("stem", c, vec![]);
            let c = b.conv(8, 8, 3, 1, 8);
            let b1 = b.push("dw1", c, vec![b0]);
            let c = b.conv(8, 12, 1, 1, 1);
            let b2 = b.push("pw1", c, vec![b1]);
            let c = b.conv(12, 12, 3, 2, 12);
            let b3 = b.push("dw2", c, vec![b2]);
            let c = b.conv(12, 10, 1, 1, 1);
            (b.push("pw2", c, vec![b3]), 10)
        }
    };
    b.head(last.1, TOY_CLASSES, last.0);
    NetworkGraph::new(b.blocks, TOY_INPUT).expect("toy networks are valid")
}

/// `batch` samples of standard-normal input for `shape`.
pub fn random_input(shape: [usize; 3], batch: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch * shape.iter().product::<usize>();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    Tensor::new(vec![batch, shape[0], shape[1], shape[2]], data).expect("shape")
}

/// `max|a - b| / max|a|`, the relative deviation used by function-preservation checks.
pub fn relative_deviation(reference: &Tensor, other: &Tensor) -> f64 {
    let diff = reference
        .data()
        .iter()
        .zip(other.data())
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .fold(0.0, f64::max);
    diff / reference.max_abs().max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::ForwardMode;

    #[test]
    fn toy_networks_run() {
        for t in Topology::ALL {
            let g = toy_network(t, 3);
            let x = random_input(g.input_shape, 5, 1);
            let y = g.forward(&x, ForwardMode::Float).unwrap();
            assert_eq!(y.shape(), &[5, TOY_CLASSES, 1, 1]);
            assert_eq!(g, toy_network(t, 3));
        }
    }
}
