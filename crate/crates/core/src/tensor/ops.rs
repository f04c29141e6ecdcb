use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v.to_f64() > 0.0 { v } else { T::default() })
}

/// Subgradient of ReLU with `relu'(0) = 0`.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?} vs {:?}", input.shape(), grad_out.shape()),
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x.to_f64() > 0.0 { g } else { T::default() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| T::from_f64(x.to_f64() + y.to_f64()))
        .collect();
    Tensor::new(a.shape().to_vec(), data)?.check_finite("add")
}

/// Multiplies channel `c` of an NCHW tensor by `per_channel[c]`.
pub fn elementwise_scale<T: Scalar>(input: &Tensor<T>, per_channel: &[f64]) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("elementwise_scale")?;
    if per_channel.len() != c {
        return Err(Error::shape(
            "elementwise_scale",
            format!("{} scales for {c} channels", per_channel.len()),
        ));
    }
    if per_channel.iter().all(|&s| s == 1.0) {
        return Ok(input.clone());
    }
    let plane = h * w;
    let mut out = input.clone();
    for b in 0..n {
        for (ch, &s) in per_channel.iter().enumerate() {
            let start = (b * c + ch) * plane;
            for v in &mut out.data_mut()[start..start + plane] {
                *v = T::from_f64(v.to_f64() * s);
            }
        }
    }
    out.check_finite("elementwise_scale")
}

/// Average pooling without padding.
pub fn avg_pool<T: Scalar>(input: &Tensor<T>, kernel: [usize; 2], stride: [usize; 2]) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("avg_pool")?;
    let [kh, kw] = kernel;
    if kh == 0 || kw == 0 || stride.contains(&0) || kh > h || kw > w {
        return Err(Error::shape(
            "avg_pool",
            format!("window {kernel:?} / stride {stride:?} incompatible with {h}x{w}"),
        ));
    }
    let oh = (h - kh) / stride[0] + 1;
    let ow = (w - kw) / stride[1] + 1;
    let inv = 1.0 / (kh * kw) as f64;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for z in 0..ow {
                let mut acc = 0.0f64;
                for i in 0..kh {
                    let row = base + (y * stride[0] + i) * w + z * stride[1];
                    acc += x[row..row + kw].iter().map(|v| v.to_f64()).sum::<f64>();
                }
                out.push(T::from_f64(acc * inv));
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::from_f64_slice(vec![3], &[-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu::<f32>(&x).data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::from_f64_slice(vec![3], &[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(relu_backward::<f32>(&x, &g).unwrap().data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn add_zeros_is_identity() {
        let x = Tensor::from_f64_slice(vec![1, 2, 1, 2], &[1.5, -2.0, 3.25, 0.0]).unwrap();
        let z = Tensor::<f32>::zeros(vec![1, 2, 1, 2]);
        assert_eq!(add(&x, &z).unwrap(), x);
        assert!(add(&x, &Tensor::zeros(vec![1, 2, 2, 1])).is_err());
    }

    #[test]
    fn unit_scale_is_identity() {
        let x = Tensor::from_f64_slice(vec![2, 2, 1, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(elementwise_scale::<f32>(&x, &[1.0, 1.0]).unwrap(), x);
        let y = elementwise_scale::<f32>(&x, &[2.0, -1.0]).unwrap();
        assert_eq!(y.data(), &[2.0, -2.0, 6.0, -4.0]);
        assert!(elementwise_scale::<f32>(&x, &[1.0]).is_err());
    }

    #[test]
    fn pooling() {
        let x = Tensor::from_f64_slice(vec![1, 1, 2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let y = avg_pool::<f64>(&x, [2, 2], [2, 2]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[3.5, 5.5]);
        let g = avg_pool::<f64>(&x, [2, 4], [1, 1]).unwrap();
        assert_eq!(g.data(), &[4.5]);
    }
}
