//! Pure forward and backward kernels.
//!
//! Every function here is side-effect free: the tape calls the forward
//! kernels while recording and the backward kernels while reversing, and the
//! forward kernels are also usable directly on plain tensors.

use rand::Rng;

use super::scalar::{gemm, MatRef};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: usize,
    pub padding: usize,
}

impl ConvShape {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let &[batch, cin, d, h, w] = input else {
            return Err(Error::shape(format!(
                "conv3d input must be (B, Cin, D, H, W), got {input:?}"
            )));
        };
        let &[cout, kcin, kd, kh, kw] = kernel else {
            return Err(Error::shape(format!(
                "conv3d kernel must be (Cout, Cin, kd, kh, kw), got {kernel:?}"
            )));
        };
        if kcin != cin {
            return Err(Error::shape(format!(
                "conv3d channel mismatch: input has {cin} channels but kernel {kernel:?} expects {kcin}"
            )));
        }
        if bias != [cout] {
            return Err(Error::shape(format!(
                "conv3d bias must have shape [{cout}], got {bias:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv3d stride must be >= 1"));
        }
        let mut output = [0; 3];
        for (axis, (&x, &k)) in [d, h, w].iter().zip([kd, kh, kw].iter()).enumerate() {
            if x + 2 * padding < k {
                return Err(Error::shape(format!(
                    "conv3d kernel extent {k} exceeds padded input extent {} on axis {axis}",
                    x + 2 * padding
                )));
            }
            output[axis] = (x + 2 * padding - k) / stride + 1;
        }
        Ok(ConvShape {
            batch,
            cin,
            cout,
            input: [d, h, w],
            kernel: [kd, kh, kw],
            output,
            stride,
            padding,
        })
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    /// A 1x1x1 stride-1 unpadded conv is a plain matrix product on the input.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == 1 && self.padding == 0
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.cout,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }
}

/// Range of output indices `o` along one axis whose input tap `o * stride + k - pad`
/// lands inside `0..extent`.
#[inline]
fn valid_range(out: usize, extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o * stride + k >= pad  and  o * stride + k < extent + pad
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let hi = if extent + pad > k {
        ((extent + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Walks the unfolded-input matrix row by row and output line by output line,
/// calling `f(dst_offset, src_offset, valid_x_range, stride)` for each line of
/// `ow` columns. `src_offset` is the input index of the tap for `ox = 0`
/// (may be "negative", hence `isize`), or `None` when the whole line is padding.
#[inline]
fn for_each_line(s: &ConvShape, mut f: impl FnMut(usize, Option<isize>, (usize, usize))) {
    let [d, h, w] = s.input;
    let [kd, kh, kw] = s.kernel;
    let [od, oh, ow] = s.output;
    let p = s.out_voxels();
    let pad = s.padding as isize;
    let mut row = 0;
    for ci in 0..s.cin {
        let chan = (ci * d * h * w) as isize;
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let xr = valid_range(ow, w, kx, s.stride, s.padding);
                    let mut dst = row * p;
                    for oz in 0..od {
                        let iz = (oz * s.stride + kz) as isize - pad;
                        for oy in 0..oh {
                            let iy = (oy * s.stride + ky) as isize - pad;
                            let inside = iz >= 0 && iz < d as isize && iy >= 0 && iy < h as isize;
                            let src = inside.then(|| {
                                chan + (iz * h as isize + iy) * w as isize + kx as isize - pad
                            });
                            f(dst, src, xr);
                            dst += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn im2col<T: Scalar>(x: &[T], s: &ConvShape, col: &mut [T]) {
    let ow = s.output[2];
    let st = s.stride;
    for_each_line(s, |dst, src, (lo, hi)| {
        let line = &mut col[dst..dst + ow];
        match src {
            None => line.fill(T::zero()),
            Some(base) => {
                line[..lo].fill(T::zero());
                line[hi..].fill(T::zero());
                let start = (base + (lo * st) as isize) as usize;
                if st == 1 {
                    line[lo..hi].copy_from_slice(&x[start..start + (hi - lo)]);
                } else {
                    for (j, v) in line[lo..hi].iter_mut().enumerate() {
                        *v = x[start + j * st];
                    }
                }
            }
        }
    });
}

fn col2im<T: Scalar>(col: &[T], s: &ConvShape, dx: &mut [T]) {
    let st = s.stride;
    for_each_line(s, |src, dst, (lo, hi)| {
        if let Some(base) = dst {
            let start = (base + (lo * st) as isize) as usize;
            for (j, &v) in col[src + lo..src + hi].iter().enumerate() {
                dx[start + j * st] += v;
            }
        }
    });
}

/// Direct cross-correlation: `out[b, o] = bias[o] + sum_c (kernel[o, c] * input[b, c])`.
pub fn conv3d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let s = ConvShape::new(input.shape(), kernel.shape(), bias.shape(), stride, padding)?;
    Ok(conv3d_with(&s, input.data(), kernel.data(), bias.data()))
}

pub(crate) fn conv3d_with<T: Scalar>(s: &ConvShape, x: &[T], k: &[T], bias: &[T]) -> Tensor<T> {
    let p = s.out_voxels();
    let kl = s.patch_len();
    let in_stride = s.cin * s.in_voxels();
    let mut out = vec![T::zero(); s.batch * s.cout * p];
    let mut col = if s.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kl * p]
    };
    let weights = MatRef::row_major(k, s.cout, kl);
    for b in 0..s.batch {
        let xb = &x[b * in_stride..(b + 1) * in_stride];
        let ob = &mut out[b * s.cout * p..(b + 1) * s.cout * p];
        for (o, row) in ob.chunks_exact_mut(p).enumerate() {
            row.fill(bias[o]);
        }
        let cols = if s.is_pointwise() {
            MatRef::row_major(xb, kl, p)
        } else {
            im2col(xb, s, &mut col);
            MatRef::row_major(&col, kl, p)
        };
        gemm(weights, cols, T::one(), ob);
    }
    Tensor::from_parts(s.output_shape(), out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv3d_backward<T: Scalar>(
    s: &ConvShape,
    x: &[T],
    k: &[T],
    gy: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let p = s.out_voxels();
    let kl = s.patch_len();
    let in_stride = s.cin * s.in_voxels();
    let mut dk = vec![T::zero(); s.cout * kl];
    let mut db = vec![T::zero(); s.cout];
    let mut dx = need_input.then(|| vec![T::zero(); s.batch * in_stride]);
    let mut col = if s.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kl * p]
    };
    let mut dcol = if need_input && !s.is_pointwise() {
        vec![T::zero(); kl * p]
    } else {
        Vec::new()
    };
    let weights = MatRef::row_major(k, s.cout, kl);
    for b in 0..s.batch {
        let xb = &x[b * in_stride..(b + 1) * in_stride];
        let gb = &gy[b * s.cout * p..(b + 1) * s.cout * p];
        for (o, row) in gb.chunks_exact(p).enumerate() {
            db[o] += row.iter().copied().sum::<T>();
        }
        let grad_out = MatRef::row_major(gb, s.cout, p);
        let cols = if s.is_pointwise() {
            MatRef::row_major(xb, kl, p)
        } else {
            im2col(xb, s, &mut col);
            MatRef::row_major(&col, kl, p)
        };
        gemm(grad_out, cols.t(), T::one(), &mut dk);
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_stride..(b + 1) * in_stride];
            if s.is_pointwise() {
                gemm(weights.t(), grad_out, T::one(), dxb);
            } else {
                gemm(weights.t(), grad_out, T::zero(), &mut dcol);
                col2im(&dcol, s, dxb);
            }
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

fn check_channel_param<T: Scalar>(p: &Tensor<T>, channels: usize, what: &str) -> Result<()> {
    if p.shape() != [channels] {
        return Err(Error::shape(format!(
            "instance_norm3d {what} must have shape [{channels}], got {:?}",
            p.shape()
        )));
    }
    Ok(())
}

/// Per-(batch, channel) normalization with the population variance.
pub fn instance_norm3d<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    instance_norm3d_stats(input, gamma, beta, eps).map(|(y, _)| y)
}

pub(crate) fn instance_norm3d_stats<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let [b, c, d, h, w] = input.dims5()?;
    check_channel_param(gamma, c, "gamma")?;
    check_channel_param(beta, c, "beta")?;
    if !(eps > T::zero()) {
        return Err(Error::invalid("instance_norm3d eps must be > 0"));
    }
    let n = d * h * w;
    let mut out = vec![T::zero(); input.len()];
    let mut stats = NormStats {
        mean: Vec::with_capacity(b * c),
        inv_std: Vec::with_capacity(b * c),
    };
    for (slice_idx, (xs, ys)) in input
        .data()
        .chunks_exact(n)
        .zip(out.chunks_exact_mut(n))
        .enumerate()
    {
        let ch = slice_idx % c;
        let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
        let var = xs
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        let mean = T::from_f64(mean);
        let inv = T::from_f64(1.0 / (var + eps.as_f64()).sqrt());
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        for (y, &x) in ys.iter_mut().zip(xs) {
            *y = (x - mean) * inv * g + bt;
        }
        stats.mean.push(mean);
        stats.inv_std.push(inv);
    }
    Ok((Tensor::from_parts(input.shape().to_vec(), out), stats))
}

pub(crate) fn instance_norm3d_backward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    stats: &NormStats<T>,
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let shape = input.shape();
    let c = shape[1];
    let n: usize = shape[2..].iter().product();
    let nt = T::from_f64(n as f64);
    let mut dx = vec![T::zero(); input.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (slice_idx, ((xs, gs), dxs)) in input
        .data()
        .chunks_exact(n)
        .zip(gy.chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
        .enumerate()
    {
        let ch = slice_idx % c;
        let (mean, inv) = (stats.mean[slice_idx], stats.inv_std[slice_idx]);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for (&x, &g) in xs.iter().zip(gs) {
            sum_g += g;
            sum_gx += g * (x - mean) * inv;
        }
        dgamma[ch] += sum_gx;
        dbeta[ch] += sum_g;
        let scale = gamma[ch] * inv / nt;
        for ((d, &x), &g) in dxs.iter_mut().zip(xs).zip(gs) {
            let xhat = (x - mean) * inv;
            *d = scale * (nt * g - sum_g - xhat * sum_gx);
        }
    }
    (dx, dgamma, dbeta)
}

/// `x` for `x >= 0`, `slope * x` otherwise.
pub fn leaky_relu<T: Scalar>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    input.map(|x| if x >= T::zero() { x } else { slope * x })
}

pub(crate) fn leaky_relu_backward<T: Scalar>(x: &[T], slope: T, gy: &[T]) -> Vec<T> {
    x.iter()
        .zip(gy)
        .map(|(&x, &g)| if x >= T::zero() { g } else { slope * g })
        .collect()
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| x.max(T::zero()))
}

pub(crate) fn relu_backward<T: Scalar>(x: &[T], gy: &[T]) -> Vec<T> {
    x.iter()
        .zip(gy)
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect()
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| {
        if x >= T::zero() {
            T::one() / (T::one() + (-x).exp())
        } else {
            let e = x.exp();
            e / (T::one() + e)
        }
    })
}

pub(crate) fn sigmoid_backward<T: Scalar>(y: &[T], gy: &[T]) -> Vec<T> {
    y.iter()
        .zip(gy)
        .map(|(&y, &g)| g * y * (T::one() - y))
        .collect()
}

/// Replicates every voxel into a 2x2x2 block.
pub fn nearest_upsample2x<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, d, h, w] = input.dims5()?;
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    let src = input.data();
    let mut out = vec![T::zero(); b * c * d2 * h2 * w2];
    for (slice, dst) in out.chunks_exact_mut(d2 * h2 * w2).enumerate() {
        let xs = &src[slice * d * h * w..(slice + 1) * d * h * w];
        for z in 0..d2 {
            for y in 0..h2 {
                let srow = &xs[((z / 2) * h + y / 2) * w..][..w];
                let drow = &mut dst[(z * h2 + y) * w2..][..w2];
                for (x, v) in drow.iter_mut().enumerate() {
                    *v = srow[x / 2];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, d2, h2, w2], out))
}

pub(crate) fn nearest_upsample2x_backward<T: Scalar>(in_shape: &[usize], gy: &[T]) -> Vec<T> {
    let (d, h, w) = (in_shape[2], in_shape[3], in_shape[4]);
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    let n: usize = in_shape.iter().product();
    let mut dx = vec![T::zero(); n];
    for (slice, gs) in gy.chunks_exact(d2 * h2 * w2).enumerate() {
        let dxs = &mut dx[slice * d * h * w..(slice + 1) * d * h * w];
        for z in 0..d2 {
            for y in 0..h2 {
                let grow = &gs[(z * h2 + y) * w2..][..w2];
                let drow = &mut dxs[((z / 2) * h + y / 2) * w..][..w];
                for (x, &g) in grow.iter().enumerate() {
                    drow[x / 2] += g;
                }
            }
        }
    }
    dx
}

/// `relu(x) / max(relu(x))`, or all zeros when nothing is positive.
pub fn normalized_relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    normalized_relu_argmax(input).0
}

/// Also returns the selected maximum's linear index (lowest index on ties).
pub(crate) fn normalized_relu_argmax<T: Scalar>(input: &Tensor<T>) -> (Tensor<T>, Option<usize>) {
    let mut best: Option<(usize, T)> = None;
    for (i, &x) in input.data().iter().enumerate() {
        if x > T::zero() && best.is_none_or(|(_, m)| x > m) {
            best = Some((i, x));
        }
    }
    match best {
        None => (Tensor::zeros(input.shape()), None),
        Some((idx, m)) => {
            let y = input.map(|x| if x > T::zero() { x / m } else { T::zero() });
            (y, Some(idx))
        }
    }
}

pub(crate) fn normalized_relu_backward<T: Scalar>(
    x: &[T],
    argmax: Option<usize>,
    gy: &[T],
) -> Vec<T> {
    let Some(k) = argmax else {
        return vec![T::zero(); x.len()];
    };
    let m = x[k];
    // d/dr_i of r_j / m, plus the shared dependency on m = r_k.
    let mut dot = T::zero();
    for (&xi, &g) in x.iter().zip(gy) {
        if xi > T::zero() {
            dot += g * xi;
        }
    }
    let mut dx: Vec<T> = x
        .iter()
        .zip(gy)
        .map(|(&xi, &g)| if xi > T::zero() { g / m } else { T::zero() })
        .collect();
    dx[k] -= dot / (m * m);
    dx
}

/// Per-(batch, channel) inverted-dropout multipliers: 0 for dropped channels,
/// `1 / (1 - p)` for survivors.
pub(crate) fn dropout_scales<T: Scalar, R: Rng + ?Sized>(
    slices: usize,
    p: f64,
    rng: &mut R,
) -> Vec<T> {
    let keep = T::from_f64(1.0 / (1.0 - p));
    (0..slices)
        .map(|_| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

pub(crate) fn scale_slices<T: Scalar>(x: &[T], scales: &[T]) -> Vec<T> {
    let n = x.len() / scales.len();
    x.chunks_exact(n)
        .zip(scales)
        .flat_map(|(xs, &s)| xs.iter().map(move |&v| v * s))
        .collect()
}

/// Channel-wise ("3D") dropout. Identity when inactive or `p == 0`.
pub fn dropout3d<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    p: f64,
    rng: &mut R,
    active: bool,
) -> Result<Tensor<T>> {
    check_dropout_p(p)?;
    let [b, c, ..] = input.dims5()?;
    if !active || p == 0.0 {
        return Ok(input.clone());
    }
    let scales = dropout_scales::<T, R>(b * c, p, rng);
    Ok(Tensor::from_parts(
        input.shape().to_vec(),
        scale_slices(input.data(), &scales),
    ))
}

pub(crate) fn check_dropout_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    Ok(())
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    Ok(Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect(),
    ))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    Ok(Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect(),
    ))
}

pub(crate) fn concat_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != 5 || b.len() != 5 || a[0] != b[0] || a[2..] != b[2..] {
        return Err(Error::shape(format!(
            "concat_channels: shapes {a:?} and {b:?} differ outside the channel axis"
        )));
    }
    let mut out = a.to_vec();
    out[1] = a[1] + b[1];
    Ok(out)
}

/// Concatenates along the channel axis: `a`'s channels first.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = concat_shape(a.shape(), b.shape())?;
    let batch = shape[0];
    let (na, nb) = (a.len() / batch, b.len() / batch);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..batch {
        out.extend_from_slice(&a.data()[i * na..(i + 1) * na]);
        out.extend_from_slice(&b.data()[i * nb..(i + 1) * nb]);
    }
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn split_channels<T: Scalar>(
    g: &[T],
    batch: usize,
    na: usize,
    nb: usize,
) -> (Vec<T>, Vec<T>) {
    let mut ga = Vec::with_capacity(batch * na);
    let mut gb = Vec::with_capacity(batch * nb);
    for chunk in g.chunks_exact(na + nb) {
        ga.extend_from_slice(&chunk[..na]);
        gb.extend_from_slice(&chunk[na..]);
    }
    (ga, gb)
}

pub(crate) fn gate_shape(x: &[usize], alpha: &[usize]) -> Result<()> {
    if x.len() != 5 || alpha.len() != 5 || alpha[1] != 1 || x[0] != alpha[0] || x[2..] != alpha[2..]
    {
        return Err(Error::shape(format!(
            "gating coefficients {alpha:?} must be single-channel and match {x:?} spatially"
        )));
    }
    Ok(())
}

/// `x * alpha`, with the single-channel `alpha` broadcast over `x`'s channels.
pub fn scale_by_map<T: Scalar>(x: &Tensor<T>, alpha: &Tensor<T>) -> Result<Tensor<T>> {
    gate_shape(x.shape(), alpha.shape())?;
    let n: usize = x.shape()[2..].iter().product();
    let c = x.shape()[1];
    let mut out = Vec::with_capacity(x.len());
    for (i, xs) in x.data().chunks_exact(n).enumerate() {
        let a = &alpha.data()[(i / c) * n..][..n];
        out.extend(xs.iter().zip(a).map(|(&v, &s)| v * s));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn scale_by_map_backward<T: Scalar>(
    x: &Tensor<T>,
    alpha: &Tensor<T>,
    gy: &[T],
) -> (Vec<T>, Vec<T>) {
    let n: usize = x.shape()[2..].iter().product();
    let c = x.shape()[1];
    let mut dx = Vec::with_capacity(x.len());
    let mut da = vec![T::zero(); alpha.len()];
    for (i, (xs, gs)) in x.data().chunks_exact(n).zip(gy.chunks_exact(n)).enumerate() {
        let off = (i / c) * n;
        let a = &alpha.data()[off..off + n];
        let das = &mut da[off..off + n];
        for j in 0..n {
            dx.push(gs[j] * a[j]);
            das[j] += gs[j] * xs[j];
        }
    }
    (dx, da)
}

/// Soft Dice loss over every element jointly:
/// `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`, or with squared sums in
/// the denominator when `squared` is set.
pub fn soft_dice_loss_value<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    eps: f64,
    squared: bool,
) -> Result<T> {
    same_shape(pred, target, "soft_dice_loss")?;
    let t = DiceTerms::new(pred.data(), target.data(), eps, squared);
    Ok(T::from_f64(1.0 - t.dice()))
}

pub(crate) struct DiceTerms {
    inter: f64,
    denom: f64,
    eps: f64,
    squared: bool,
}

impl DiceTerms {
    pub fn new<T: Scalar>(p: &[T], g: &[T], eps: f64, squared: bool) -> Self {
        let mut inter = 0.0;
        let mut denom = 0.0;
        for (&p, &g) in p.iter().zip(g) {
            let (p, g) = (p.as_f64(), g.as_f64());
            inter += p * g;
            denom += if squared { p * p + g * g } else { p + g };
        }
        DiceTerms {
            inter,
            denom,
            eps,
            squared,
        }
    }

    pub fn dice(&self) -> f64 {
        (2.0 * self.inter + self.eps) / (self.denom + self.eps)
    }

    /// Gradient of the loss with respect to `a`, where `b` is the other operand.
    pub fn grad<T: Scalar>(&self, a: &[T], b: &[T], upstream: f64) -> Vec<T> {
        let num = 2.0 * self.inter + self.eps;
        let den = self.denom + self.eps;
        a.iter()
            .zip(b)
            .map(|(&a, &b)| {
                let dden = if self.squared { 2.0 * a.as_f64() } else { 1.0 };
                let d_dice = (2.0 * b.as_f64() * den - num * dden) / (den * den);
                T::from_f64(-d_dice * upstream)
            })
            .collect()
    }
}
