//! Dense NCHW tensors and the small set of kernels the compression passes need.
//!
//! Everything here is a pure function of its inputs. Convolution kernels
//! accumulate in `f64` regardless of the storage precision so that
//! function-preservation checks have headroom well below `1e-5`.

mod conv;
mod ops;

use std::fmt;

pub use conv::{conv2d_backward, conv2d_forward, conv2d_weight_grad, ConvGrads, ConvSpec};
pub use ops::{add, avg_pool, elementwise_scale, relu, relu_backward};

use crate::error::{Error, Result};

/// Storage precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Element type of a [`Tensor`]: `f32` for models, `f64` for gradient checks.
pub trait Scalar: Copy + Default + PartialEq + PartialOrd + fmt::Debug + Send + Sync + 'static {
    const PRECISION: Precision;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// A dense row-major tensor. Activations use NCHW, conv weights
/// `[c_out, c_in / groups, k_h, k_w]`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("precision", &T::PRECISION)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::default(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }

    pub(crate) fn check_finite(self, what: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Largest absolute value (0 for an empty tensor).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64().abs()).fold(0.0, f64::max)
    }

    /// `(min, max)` over all elements. `None` when empty.
    pub fn min_max(&self) -> Option<(f64, f64)> {
        let mut it = self.data.iter().map(|v| v.to_f64());
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    /// Interprets the tensor as NCHW and returns `(n, c, h, w)`.
    pub fn dims4(&self, context: &str) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::shape(
                context,
                format!("expected a 4-d NCHW tensor, got shape {other:?}"),
            )),
        }
    }

    /// Per-channel mean of an NCHW tensor.
    pub fn channel_means(&self) -> Result<Vec<f64>> {
        let (n, c, h, w) = self.dims4("channel_means")?;
        let plane = h * w;
        let mut sums = vec![0.0f64; c];
        for b in 0..n {
            for (ch, sum) in sums.iter_mut().enumerate() {
                let start = (b * c + ch) * plane;
                *sum += self.data[start..start + plane].iter().map(|v| v.to_f64()).sum::<f64>();
            }
        }
        let count = (n * plane).max(1) as f64;
        Ok(sums.into_iter().map(|s| s / count).collect())
    }

    /// Splits an NCHW tensor into batch chunks of at most `chunk` samples.
    pub fn batch_chunks(&self, chunk: usize) -> Result<Vec<Tensor<T>>> {
        let (n, c, h, w) = self.dims4("batch_chunks")?;
        let per = c * h * w;
        let chunk = chunk.max(1);
        Ok((0..n)
            .step_by(chunk)
            .map(|start| {
                let end = (start + chunk).min(n);
                Tensor {
                    shape: vec![end - start, c, h, w],
                    data: self.data[start * per..end * per].to_vec(),
                }
            })
            .collect())
    }

    /// Concatenates NCHW tensors along the batch axis.
    pub fn concat_batch(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let (_, c, h, w) = first.dims4("concat_batch")?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4("concat_batch")?;
            if (pc, ph, pw) != (c, h, w) {
                return Err(Error::shape(
                    "concat_batch",
                    format!("mismatched sample shapes {:?} vs {:?}", first.shape, p.shape),
                ));
            }
            n += pn;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![n, c, h, w],
            data,
        })
    }
}
