//! Layer-wise pruning with soft-threshold reparameterization.
//!
//! Each conv/linear layer of a student copy is trained to reproduce the
//! teacher layer's buffered output on generated inputs, with its weights
//! replaced by `W_s = sign(W) relu(|W| - sigmoid(s))`. A decay term `lambda s`
//! pushes the threshold parameter `s` up from its negative initial value.

mod baselines;
mod train;

pub use baselines::{
    baseline_budgets, erk_density_factor, max_sparsity, prune_global_threshold, prune_to_budget, BaselineMethod,
    BaselineReport, LayerBudget,
};
pub use train::{
    cosine_lr, prune_network, prune_network_in_order, train_layer, Adam, BakedLayer, LayerTrainResult, PruneConfig,
    PruneReport,
};

use crate::tensor::{Scalar, Tensor};

#[inline]
pub fn sigmoid(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

/// `sign(W) * relu(|W| - sigmoid(s))`.
pub fn str_forward<T: Scalar>(w: &Tensor<T>, s: f64) -> Tensor<T> {
    let t = sigmoid(s);
    w.map(|v| T::from_f64(soft_threshold(v.to_f64(), t)))
}

#[inline]
pub(crate) fn soft_threshold(w: f64, t: f64) -> f64 {
    let m = w.abs() - t;
    if m > 0.0 {
        m.copysign(w)
    } else {
        0.0
    }
}

/// Gradients of `sum(grad_ws * str_forward(W, s))` with respect to `W` and `s`.
/// Inactive entries (`|W| <= sigmoid(s)`) pass no gradient.
pub fn str_backward(w: &[f64], s: f64, grad_ws: &[f64]) -> (Vec<f64>, f64) {
    let t = sigmoid(s);
    let dt = t * (1.0 - t);
    let mut gs = 0.0;
    let gw = w
        .iter()
        .zip(grad_ws)
        .map(|(&wv, &g)| {
            if wv.abs() > t {
                gs -= wv.signum() * dt * g;
                g
            } else {
                0.0
            }
        })
        .collect();
    (gw, gs)
}

/// Fraction of entries of `W_s` that are exactly zero.
pub fn str_sparsity<T: Scalar>(w: &Tensor<T>, s: f64) -> f64 {
    let t = sigmoid(s);
    let zeros = w.data().iter().filter(|v| soft_threshold(v.to_f64(), t) == 0.0).count();
    zeros as f64 / w.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_examples() {
        let w = Tensor::<f64>::from_f64_slice(vec![2], &[0.5, -1.5]).unwrap();
        assert_eq!(str_forward(&w, 0.0).data(), &[0.0, -1.0]);
        let r = Tensor::<f64>::from_f64_slice(vec![3], &[0.3, -2.0, 1e-3]).unwrap();
        let y = str_forward(&r, -20.0);
        for (a, b) in r.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn backward_examples() {
        let (gw, gs) = str_backward(&[2.0], 0.0, &[1.0]);
        assert_eq!(gw, vec![1.0]);
        assert_eq!(gs, -0.25);
        let (gw, gs) = str_backward(&[0.1, -0.4], 0.0, &[3.0, 2.0]);
        assert_eq!(gw, vec![0.0, 0.0]);
        assert_eq!(gs, 0.0);
    }

    #[test]
    fn sparsity_is_monotone_in_s() {
        let w = Tensor::<f32>::from_f64_slice(vec![6], &[0.01, -0.1, 0.2, -0.4, 0.6, 0.9]).unwrap();
        let mut last = 0.0;
        for i in 0..40 {
            let s = -8.0 + 0.25 * i as f64;
            let sp = str_sparsity(&w, s);
            assert!(sp >= last);
            last = sp;
        }
    }
}
