//! 2-d convolution via batched im2col + f64 GEMM.
//!
//! The batch is processed in fixed-size chunks, and reductions over the batch
//! are summed chunk by chunk in order, so results are bit-identical from run to
//! run.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Upper bound on the number of f64 entries in one im2col buffer.
const COLS_BUDGET: usize = 1 << 22;

/// A convolution layer: weight `[c_out, c_in / groups, k_h, k_w]` plus bias `[c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    pub groups: usize,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: [usize; 2],
        padding: [usize; 2],
        groups: usize,
    ) -> Result<Self> {
        let spec = ConvSpec {
            weight,
            bias,
            stride,
            padding,
            groups,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A fully-connected layer stored as a 1x1 convolution.
    pub fn linear(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (o, i) = match weight.shape() {
            &[o, i] => (o, i),
            other => {
                return Err(Error::shape(
                    "ConvSpec::linear",
                    format!("expected a 2-d weight, got {other:?}"),
                ))
            }
        };
        Self::new(weight.reshape(vec![o, i, 1, 1])?, bias, [1, 1], [0, 0], 1)
    }

    pub fn validate(&self) -> Result<()> {
        let ws = self.weight.shape();
        if ws.len() != 4 {
            return Err(Error::shape("conv spec", format!("weight must be 4-d, got {ws:?}")));
        }
        if self.groups == 0 {
            return Err(Error::shape("conv spec", "groups must be positive"));
        }
        if ws[0] % self.groups != 0 {
            return Err(Error::shape(
                "conv spec",
                format!("c_out = {} not divisible by groups = {}", ws[0], self.groups),
            ));
        }
        if self.stride.contains(&0) {
            return Err(Error::shape("conv spec", "stride must be positive"));
        }
        if self.bias.shape() != [ws[0]] {
            return Err(Error::shape(
                "conv spec",
                format!("bias shape {:?} does not match c_out = {}", self.bias.shape(), ws[0]),
            ));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn kernel(&self) -> [usize; 2] {
        [self.weight.shape()[2], self.weight.shape()[3]]
    }

    pub fn in_per_group(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels() / self.groups
    }

    /// Spatial output size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let [kh, kw] = self.kernel();
        let hp = h + 2 * self.padding[0];
        let wp = w + 2 * self.padding[1];
        if hp < kh || wp < kw {
            return Err(Error::shape(
                "conv2d",
                format!("padded input {hp}x{wp} smaller than kernel {kh}x{kw}"),
            ));
        }
        Ok(((hp - kh) / self.stride[0] + 1, (wp - kw) / self.stride[1] + 1))
    }

    /// Number of weights in this layer.
    pub fn weight_count(&self) -> usize {
        self.weight.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    groups: usize,
    cig: usize,
    cog: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Self> {
        spec.validate()?;
        let (n, c_in, h, w) = input.dims4("conv2d input")?;
        if c_in != spec.in_channels() {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels but the layer expects {}", spec.in_channels()),
            ));
        }
        let (oh, ow) = spec.output_hw(h, w)?;
        let [kh, kw] = spec.kernel();
        Ok(Geometry {
            n,
            c_in,
            h,
            w,
            c_out: spec.out_channels(),
            groups: spec.groups,
            cig: spec.in_per_group(),
            cog: spec.out_per_group(),
            kh,
            kw,
            sh: spec.stride[0],
            sw: spec.stride[1],
            ph: spec.padding[0],
            pw: spec.padding[1],
            oh,
            ow,
        })
    }

    fn k(&self) -> usize {
        self.cig * self.kh * self.kw
    }

    fn plane_out(&self) -> usize {
        self.oh * self.ow
    }

    fn chunk(&self) -> usize {
        (COLS_BUDGET / (self.k() * self.plane_out()).max(1)).clamp(1, self.n.max(1))
    }

    /// Range of output columns `ow` whose tap `kj` lands inside the input.
    #[inline]
    fn valid_ow(&self, kj: usize) -> (usize, usize) {
        // iw = ow * sw + kj - pw must lie in [0, w)
        let lo = if kj >= self.pw {
            0
        } else {
            (self.pw - kj).div_ceil(self.sw)
        };
        let hi = if self.w + self.pw > kj {
            ((self.w + self.pw - kj - 1) / self.sw + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// im2col for samples `[b0, b0 + nb)` of group `g`; rows are `(icl, ki, kj)`.
    fn im2col<T: Scalar>(&self, input: &[T], g: usize, b0: usize, nb: usize, cols: &mut Vec<f64>) {
        let p = self.plane_out();
        let width = nb * p;
        cols.clear();
        cols.resize(self.k() * width, 0.0);
        for icl in 0..self.cig {
            let ic = g * self.cig + icl;
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (icl * self.kh + ki) * self.kw + kj;
                    let dst_row = &mut cols[row * width..(row + 1) * width];
                    let (ow_lo, ow_hi) = self.valid_ow(kj);
                    for bl in 0..nb {
                        let plane = &input[((b0 + bl) * self.c_in + ic) * self.h * self.w..][..self.h * self.w];
                        for o_h in 0..self.oh {
                            let ih = (o_h * self.sh + ki) as isize - self.ph as isize;
                            if ih < 0 || ih as usize >= self.h {
                                continue;
                            }
                            let src = &plane[ih as usize * self.w..][..self.w];
                            let dst = &mut dst_row[bl * p + o_h * self.ow..][..self.ow];
                            for o_w in ow_lo..ow_hi {
                                dst[o_w] = src[o_w * self.sw + kj - self.pw].to_f64();
                            }
                        }
                    }
                }
            }
        }
    }

    /// Inverse of [`Self::im2col`]: scatter-adds `dcols` into the f64 input gradient.
    fn col2im(&self, dcols: &[f64], g: usize, b0: usize, nb: usize, grad_in: &mut [f64]) {
        let p = self.plane_out();
        let width = nb * p;
        for icl in 0..self.cig {
            let ic = g * self.cig + icl;
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (icl * self.kh + ki) * self.kw + kj;
                    let src_row = &dcols[row * width..(row + 1) * width];
                    let (ow_lo, ow_hi) = self.valid_ow(kj);
                    for bl in 0..nb {
                        let base = ((b0 + bl) * self.c_in + ic) * self.h * self.w;
                        for o_h in 0..self.oh {
                            let ih = (o_h * self.sh + ki) as isize - self.ph as isize;
                            if ih < 0 || ih as usize >= self.h {
                                continue;
                            }
                            let dst = &mut grad_in[base + ih as usize * self.w..][..self.w];
                            let src = &src_row[bl * p + o_h * self.ow..][..self.ow];
                            for o_w in ow_lo..ow_hi {
                                dst[o_w * self.sw + kj - self.pw] += src[o_w];
                            }
                        }
                    }
                }
            }
        }
    }

    fn check_grad_out<T: Scalar>(&self, grad_out: &Tensor<T>) -> Result<()> {
        let expected = [self.n, self.c_out, self.oh, self.ow];
        if grad_out.shape() != expected {
            return Err(Error::shape(
                "conv2d_backward",
                format!(
                    "grad_out shape {:?} does not match forward output {expected:?}",
                    grad_out.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Gathers `grad_out[b0..b0+nb, oc, :]` for the output channels of group `g`
    /// into a `[cog, nb * P]` matrix.
    fn gather_out<T: Scalar>(&self, grad_out: &[T], g: usize, b0: usize, nb: usize, buf: &mut Vec<f64>) {
        let p = self.plane_out();
        let width = nb * p;
        buf.clear();
        buf.resize(self.cog * width, 0.0);
        for ocl in 0..self.cog {
            let oc = g * self.cog + ocl;
            for bl in 0..nb {
                let src = &grad_out[((b0 + bl) * self.c_out + oc) * p..][..p];
                let dst = &mut buf[ocl * width + bl * p..][..p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s.to_f64();
                }
            }
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

const LANES: usize = 4;

/// `acc[l] += w[l] * x` for the `LANES` rows of `acc`, each `width` long.
#[inline]
fn axpy4(acc: &mut [f64], width: usize, w: [f64; LANES], x: &[f64]) {
    let (a0, rest) = acc.split_at_mut(width);
    let (a1, rest) = rest.split_at_mut(width);
    let (a2, a3) = rest.split_at_mut(width);
    for i in 0..width.min(x.len()) {
        let xi = x[i];
        a0[i] += w[0] * xi;
        a1[i] += w[1] * xi;
        a2[i] += w[2] * xi;
        a3[i] += w[3] * xi;
    }
}

/// Dot products of the first `m` rows of `rows` (each `width` long) with `x`.
#[inline]
fn dot4(rows: &[f64], width: usize, m: usize, x: &[f64]) -> [f64; LANES] {
    let mut out = [0.0; LANES];
    if m == LANES {
        let (r0, rest) = rows.split_at(width);
        let (r1, rest) = rest.split_at(width);
        let (r2, r3) = rest.split_at(width);
        let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..width.min(x.len()) {
            let xi = x[i];
            s0 += r0[i] * xi;
            s1 += r1[i] * xi;
            s2 += r2[i] * xi;
            s3 += r3[i] * xi;
        }
        out = [s0, s1, s2, s3];
    } else {
        for (l, o) in out.iter_mut().enumerate().take(m) {
            *o = rows[l * width..(l + 1) * width].iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// Forward convolution. Output is `[n, c_out, oh, ow]`.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    let geo = Geometry::new(input, spec)?;
    let p = geo.plane_out();
    let k = geo.k();
    let weight: Vec<f64> = spec.weight.to_f64_vec();
    let bias: Vec<f64> = spec.bias.to_f64_vec();
    let mut out = vec![T::default(); geo.n * geo.c_out * p];
    let mut cols = Vec::new();
    let mut acc = Vec::new();
    let chunk = geo.chunk();
    let mut b0 = 0;
    while b0 < geo.n {
        let nb = chunk.min(geo.n - b0);
        let width = nb * p;
        for g in 0..geo.groups {
            geo.im2col(input.data(), g, b0, nb, &mut cols);
            for ocb in (0..geo.cog).step_by(LANES) {
                let m = LANES.min(geo.cog - ocb);
                let oc0 = g * geo.cog + ocb;
                acc.clear();
                acc.resize(LANES * width, 0.0);
                for l in 0..m {
                    acc[l * width..(l + 1) * width].fill(bias[oc0 + l]);
                }
                let mut wv = [0.0f64; LANES];
                for kk in 0..k {
                    for (l, w) in wv.iter_mut().enumerate() {
                        *w = if l < m { weight[(oc0 + l) * k + kk] } else { 0.0 };
                    }
                    if wv.iter().all(|&w| w == 0.0) {
                        continue;
                    }
                    axpy4(&mut acc, width, wv, &cols[kk * width..(kk + 1) * width]);
                }
                for l in 0..m {
                    let oc = oc0 + l;
                    let row = &acc[l * width..(l + 1) * width];
                    for bl in 0..nb {
                        let dst = &mut out[((b0 + bl) * geo.c_out + oc) * p..][..p];
                        for (d, a) in dst.iter_mut().zip(&row[bl * p..(bl + 1) * p]) {
                            *d = T::from_f64(*a);
                        }
                    }
                }
            }
        }
        b0 += nb;
    }
    Tensor::new(vec![geo.n, geo.c_out, geo.oh, geo.ow], out)?.check_finite("conv2d_forward")
}

/// Gradients of `sum(grad_out * conv2d_forward(input, spec))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T: Scalar = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn backward_impl<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    let geo = Geometry::new(input, spec)?;
    geo.check_grad_out(grad_out)?;
    let p = geo.plane_out();
    let k = geo.k();
    let weight = spec.weight.to_f64_vec();
    let mut gw = vec![0.0f64; geo.c_out * k];
    let mut gb = vec![0.0f64; geo.c_out];
    let mut gi = need_input.then(|| vec![0.0f64; input.len()]);
    let mut cols = Vec::new();
    let mut go = Vec::new();
    let mut dcols = Vec::new();
    let chunk = geo.chunk();
    let mut b0 = 0;
    while b0 < geo.n {
        let nb = chunk.min(geo.n - b0);
        let width = nb * p;
        for g in 0..geo.groups {
            geo.gather_out(grad_out.data(), g, b0, nb, &mut go);
            geo.im2col(input.data(), g, b0, nb, &mut cols);
            for ocl in 0..geo.cog {
                gb[g * geo.cog + ocl] += go[ocl * width..(ocl + 1) * width].iter().sum::<f64>();
            }
            for ocb in (0..geo.cog).step_by(LANES) {
                let m = LANES.min(geo.cog - ocb);
                let oc0 = g * geo.cog + ocb;
                let rows = &go[ocb * width..(ocb + m) * width];
                for kk in 0..k {
                    let d = dot4(rows, width, m, &cols[kk * width..(kk + 1) * width]);
                    for (l, v) in d.iter().take(m).enumerate() {
                        gw[(oc0 + l) * k + kk] += v;
                    }
                }
            }
            if let Some(gi) = gi.as_mut() {
                dcols.clear();
                dcols.resize(k * width, 0.0);
                for ocl in 0..geo.cog {
                    let oc = g * geo.cog + ocl;
                    let go_row = &go[ocl * width..(ocl + 1) * width];
                    for kk in 0..k {
                        let wv = weight[oc * k + kk];
                        if wv != 0.0 {
                            axpy(&mut dcols[kk * width..(kk + 1) * width], wv, go_row);
                        }
                    }
                }
                geo.col2im(&dcols, g, b0, nb, gi);
            }
        }
        b0 += nb;
    }
    Ok((gi, gw, gb))
}

/// Full backward pass: gradients w.r.t. input, weight and bias.
pub fn conv2d_backward<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    let (gi, gw, gb) = backward_impl(input, spec, grad_out, true)?;
    let gi = gi.unwrap_or_default();
    Ok(ConvGrads {
        input: Tensor::from_f64_slice(input.shape().to_vec(), &gi)?.check_finite("conv2d_backward")?,
        weight: Tensor::from_f64_slice(spec.weight.shape().to_vec(), &gw)?.check_finite("conv2d_backward")?,
        bias: Tensor::from_f64_slice(vec![gb.len()], &gb)?.check_finite("conv2d_backward")?,
    })
}

/// Weight gradient only, in f64 (the layer trainer never needs the input gradient).
pub fn conv2d_weight_grad<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec<T>, grad_out: &Tensor<T>) -> Result<Vec<f64>> {
    let (_, gw, _) = backward_impl(input, spec, grad_out, false)?;
    if gw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("conv2d_weight_grad".into()));
    }
    Ok(gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_spec(w: f64, b: f64) -> ConvSpec<f64> {
        ConvSpec::new(
            Tensor::from_f64_slice(vec![1, 1, 1, 1], &[w]).unwrap(),
            Tensor::from_f64_slice(vec![1], &[b]).unwrap(),
            [1, 1],
            [0, 0],
            1,
        )
        .unwrap()
    }

    /// Direct quadruple loop, written independently of the im2col path.
    fn naive_conv(input: &Tensor<f64>, spec: &ConvSpec<f64>) -> Vec<f64> {
        let (n, c, h, w) = input.dims4("naive").unwrap();
        let [kh, kw] = spec.kernel();
        let (oh, ow) = spec.output_hw(h, w).unwrap();
        let co = spec.out_channels();
        let cig = spec.in_per_group();
        let cog = co / spec.groups;
        let x = input.data();
        let wt = spec.weight.data();
        let mut out = vec![0.0; n * co * oh * ow];
        for b in 0..n {
            for o in 0..co {
                let g = o / cog;
                for y in 0..oh {
                    for z in 0..ow {
                        let mut acc = spec.bias.data()[o];
                        for il in 0..cig {
                            let ic = g * cig + il;
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (y * spec.stride[0] + i) as isize - spec.padding[0] as isize;
                                    let ix = (z * spec.stride[1] + j) as isize - spec.padding[1] as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wt[((o * cig + il) * kh + i) * kw + j]
                                        * x[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out[((b * co + o) * oh + y) * ow + z] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn scalar_affine() {
        let spec = scalar_spec(3.0, 1.0);
        let x = Tensor::from_f64_slice(vec![1, 1, 1, 1], &[2.0]).unwrap();
        assert_eq!(conv2d_forward(&x, &spec).unwrap().data(), &[7.0]);
    }

    #[test]
    fn zero_weight_is_constant_bias() {
        let spec = ConvSpec::new(
            Tensor::<f64>::zeros(vec![2, 3, 3, 3]),
            Tensor::from_f64_slice(vec![2], &[0.5, -2.0]).unwrap(),
            [1, 1],
            [1, 1],
            1,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, vec![2, 3, 5, 5]);
        let y = conv2d_forward(&x, &spec).unwrap();
        for b in 0..2 {
            for (c, want) in [0.5, -2.0].into_iter().enumerate() {
                let start = (b * 2 + c) * 25;
                assert!(y.data()[start..start + 25].iter().all(|&v| v == want));
            }
        }
    }

    #[test]
    fn scalar_backward() {
        let spec = scalar_spec(3.0, 1.0);
        let x = Tensor::from_f64_slice(vec![1, 1, 1, 1], &[2.0]).unwrap();
        let go = Tensor::from_f64_slice(vec![1, 1, 1, 1], &[1.0]).unwrap();
        let g = conv2d_backward(&x, &spec, &go).unwrap();
        assert_eq!(g.weight.data(), &[2.0]);
        assert_eq!(g.input.data(), &[3.0]);
        assert_eq!(g.bias.data(), &[1.0]);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = ConvSpec::new(
            random_tensor(&mut rng, vec![4, 2, 3, 3]),
            random_tensor(&mut rng, vec![4]),
            [2, 1],
            [1, 0],
            1,
        )
        .unwrap();
        let x = random_tensor(&mut rng, vec![2, 2, 6, 5]);
        let y = conv2d_forward(&x, &spec).unwrap();
        let go = Tensor::zeros(y.shape().to_vec());
        let g = conv2d_backward(&x, &spec, &go).unwrap();
        assert!(g
            .input
            .data()
            .iter()
            .chain(g.weight.data())
            .chain(g.bias.data())
            .all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..60 {
            let groups = [1usize, 2, 4][trial % 3];
            let depthwise = trial % 5 == 0;
            let cig = if depthwise { 1 } else { rng.random_range(1..=4) };
            let groups = if depthwise { rng.random_range(1..=16) } else { groups };
            let c_in = cig * groups;
            let cog = if depthwise { 1 } else { rng.random_range(1..=4) };
            let c_out = cog * groups;
            let kh = rng.random_range(1..=3);
            let kw = rng.random_range(1..=3);
            let h = rng.random_range(kh..=16);
            let w = rng.random_range(kw..=16);
            let spec = ConvSpec::new(
                random_tensor(&mut rng, vec![c_out, cig, kh, kw]),
                random_tensor(&mut rng, vec![c_out]),
                [rng.random_range(1..=2), rng.random_range(1..=2)],
                [rng.random_range(0..=1), rng.random_range(0..=1)],
                groups,
            )
            .unwrap();
            let n = rng.random_range(1..=3);
            let x = random_tensor(&mut rng, vec![n, c_in, h, w]);
            let got = conv2d_forward(&x, &spec).unwrap();
            let want = naive_conv(&x, &spec);
            let scale = want.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() <= 1e-6 * scale, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let spec = scalar_spec(1.0, 0.0);
        let x = Tensor::<f64>::zeros(vec![1, 2, 1, 1]);
        assert!(matches!(conv2d_forward(&x, &spec), Err(Error::Shape { .. })));
        let x = Tensor::<f64>::zeros(vec![1, 1, 1, 1]);
        let bad_go = Tensor::<f64>::zeros(vec![1, 1, 2, 1]);
        assert!(conv2d_backward(&x, &spec, &bad_go).is_err());
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = ConvSpec::new(
            random_tensor(&mut rng, vec![8, 4, 3, 3]),
            random_tensor(&mut rng, vec![8]),
            [1, 1],
            [1, 1],
            1,
        )
        .unwrap();
        let x = random_tensor(&mut rng, vec![5, 4, 7, 7]);
        let a = conv2d_forward(&x, &spec).unwrap();
        let b = conv2d_forward(&x, &spec).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
