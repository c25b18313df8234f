//! Tensor kernels with a fixed, documented accumulation order.
//!
//! Every kernel is a pure function: same inputs, same bits, every run.
//! Reductions accumulate in ascending index order with no fused
//! multiply-add and no reassociation, so results are reproducible and the
//! test oracles can re-derive them independently. Backward functions live
//! next to their forward so the pairing is auditable; the graph in
//! [`crate::autograd`] dispatches to them.
//!
//! Kernels whose accumulations can overflow (convolution, matrix products,
//! the normalizers) scan their output for non-finite values and report an
//! error; pointwise maps of finite inputs that stay bounded by construction
//! skip the scan.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Geometry of a 2-d convolution. `weight` is laid out
/// `[out_channels, in_channels / groups, kernel, kernel]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// 1x1 convolution mixing channels at each position.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec { in_channels, out_channels, kernel: 1, stride: 1, padding: 0, groups: 1 }
    }

    /// Per-channel k x k convolution with "same" padding (odd k).
    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels: channels,
            out_channels: channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.groups == 0 {
            return Err(Error::invalid("conv2d", "kernel, stride and groups must be positive"));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "channels ({} -> {}) must divide into {} groups",
                    self.in_channels, self.out_channels, self.groups
                ),
            ));
        }
        Ok(())
    }

    /// Output extent along one spatial axis. The padded extent must split
    /// into whole strides; a fractional output is an error rather than a
    /// silent floor.
    pub fn out_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::invalid(
                "conv2d",
                format!("input {input} + padding smaller than kernel {}", self.kernel),
            ));
        }
        if (padded - self.kernel) % self.stride != 0 {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "fractional output extent: ({input} + 2*{} - {}) not divisible by stride {}",
                    self.padding, self.kernel, self.stride
                ),
            ));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

fn ensure_finite<E: Element>(t: &Tensor<E>, op: &'static str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn expect_rank<E: Element>(t: &Tensor<E>, rank: usize, op: &'static str, role: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            format!("{role} must have rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// Zero-padded 2-d convolution over `[N, C, H, W]`.
///
/// Each output element accumulates bias first, then taps in ascending
/// (channel, kernel row, kernel column) order; taps that fall in the zero
/// padding are skipped, which adds exactly the zeros they stand for.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: &ConvSpec,
) -> Result<Tensor<E>> {
    spec.validate()?;
    expect_rank(x, 4, "conv2d", "input")?;
    expect_rank(weight, 4, "conv2d", "weight")?;
    let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cig = spec.in_channels / spec.groups;
    let cog = spec.out_channels / spec.groups;
    if ci != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {ci} channels, spec expects {}", spec.in_channels),
        ));
    }
    if weight.shape() != [spec.out_channels, cig, spec.kernel, spec.kernel] {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight shape {:?} does not match spec [{}, {cig}, {}, {}]",
                weight.shape(),
                spec.out_channels,
                spec.kernel,
                spec.kernel
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{}]", b.shape(), spec.out_channels),
            ));
        }
    }
    let ho = spec.out_extent(h)?;
    let wo = spec.out_extent(w)?;
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);

    let mut out = vec![E::ZERO; n * spec.out_channels * ho * wo];
    let xd = x.data();
    let wd = weight.data();
    for im in 0..n {
        for oc in 0..spec.out_channels {
            let group = oc / cog;
            let acc0 = bias.map_or(E::ZERO, |b| b.data()[oc]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = acc0;
                    for c in 0..cig {
                        let icn = group * cig + c;
                        let xbase = ((im * ci + icn) * h) * w;
                        let wbase = ((oc * cig + c) * k) * k;
                        for u in 0..k {
                            let iy = oy * s + u;
                            if iy < p || iy >= h + p {
                                continue;
                            }
                            let iy = iy - p;
                            for v in 0..k {
                                let ix = ox * s + v;
                                if ix < p || ix >= w + p {
                                    continue;
                                }
                                let ix = ix - p;
                                acc += wd[wbase + u * k + v] * xd[xbase + iy * w + ix];
                            }
                        }
                    }
                    out[((im * spec.out_channels + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    let out = Tensor::new(&[n, spec.out_channels, ho, wo], out)?;
    ensure_finite(&out, "conv2d")?;
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input and weight, computed in a
/// single deterministic scatter pass over the output gradient.
pub fn conv2d_backward<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    spec: &ConvSpec,
    gout: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cig = spec.in_channels / spec.groups;
    let cog = spec.out_channels / spec.groups;
    let (ho, wo) = (gout.shape()[2], gout.shape()[3]);
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);

    let mut gx = vec![E::ZERO; x.numel()];
    let mut gw = vec![E::ZERO; weight.numel()];
    let xd = x.data();
    let wd = weight.data();
    let gd = gout.data();
    for im in 0..n {
        for oc in 0..spec.out_channels {
            let group = oc / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = gd[((im * spec.out_channels + oc) * ho + oy) * wo + ox];
                    for c in 0..cig {
                        let icn = group * cig + c;
                        let xbase = ((im * ci + icn) * h) * w;
                        let wbase = ((oc * cig + c) * k) * k;
                        for u in 0..k {
                            let iy = oy * s + u;
                            if iy < p || iy >= h + p {
                                continue;
                            }
                            let iy = iy - p;
                            for v in 0..k {
                                let ix = ox * s + v;
                                if ix < p || ix >= w + p {
                                    continue;
                                }
                                let ix = ix - p;
                                gx[xbase + iy * w + ix] += wd[wbase + u * k + v] * g;
                                gw[wbase + u * k + v] += xd[xbase + iy * w + ix] * g;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(x.shape(), gx)?, Tensor::new(weight.shape(), gw)?))
}

/// Bias gradient of [`conv2d`]: output gradient summed over batch and space.
pub fn conv2d_backward_bias<E: Element>(gout: &Tensor<E>) -> Result<Tensor<E>> {
    expect_rank(gout, 4, "conv2d_backward_bias", "gradient")?;
    let (n, c, h, w) = (gout.shape()[0], gout.shape()[1], gout.shape()[2], gout.shape()[3]);
    let mut gb = vec![E::ZERO; c];
    let gd = gout.data();
    for im in 0..n {
        for ch in 0..c {
            let base = (im * c + ch) * h * w;
            for i in 0..h * w {
                gb[ch] += gd[base + i];
            }
        }
    }
    Tensor::new(&[c], gb)
}

/// `[m, k] x [k, n]` matrix product, accumulating over `k` in ascending
/// order.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    expect_rank(a, 2, "matmul", "left")?;
    expect_rank(b, 2, "matmul", "right")?;
    let (m, ka) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    if ka != kb {
        return Err(Error::shape("matmul", format!("inner dims {ka} vs {kb}")));
    }
    let mut out = vec![E::ZERO; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for j in 0..n {
            let mut acc = E::ZERO;
            for k in 0..ka {
                acc += ad[i * ka + k] * bd[k * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    let out = Tensor::new(&[m, n], out)?;
    ensure_finite(&out, "matmul")?;
    Ok(out)
}

pub fn transpose2<E: Element>(t: &Tensor<E>) -> Result<Tensor<E>> {
    expect_rank(t, 2, "transpose2", "input")?;
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let td = t.data();
    let mut out = vec![E::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = td[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

/// Row-batched affine map: `y[i, o] = bias[o] + sum_k x[i, k] * w[o, k]`,
/// accumulating over `k` in ascending order.
pub fn linear<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    expect_rank(x, 2, "linear", "input")?;
    expect_rank(weight, 2, "linear", "weight")?;
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let (dout, dw) = (weight.shape()[0], weight.shape()[1]);
    if din != dw {
        return Err(Error::shape("linear", format!("input dim {din}, weight expects {dw}")));
    }
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(Error::shape(
                "linear",
                format!("bias shape {:?}, expected [{dout}]", b.shape()),
            ));
        }
    }
    let mut out = vec![E::ZERO; n * dout];
    let xd = x.data();
    let wd = weight.data();
    for i in 0..n {
        for o in 0..dout {
            let mut acc = bias.map_or(E::ZERO, |b| b.data()[o]);
            for k in 0..din {
                acc += xd[i * din + k] * wd[o * din + k];
            }
            out[i * dout + o] = acc;
        }
    }
    let out = Tensor::new(&[n, dout], out)?;
    ensure_finite(&out, "linear")?;
    Ok(out)
}

/// Gradients of [`linear`] with respect to input, weight, and bias.
pub fn linear_backward<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    gout: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = weight.shape()[0];
    let xd = x.data();
    let wd = weight.data();
    let gd = gout.data();
    let mut gx = vec![E::ZERO; n * din];
    let mut gw = vec![E::ZERO; dout * din];
    let mut gb = vec![E::ZERO; dout];
    for i in 0..n {
        for o in 0..dout {
            let g = gd[i * dout + o];
            gb[o] += g;
            for k in 0..din {
                gx[i * din + k] += g * wd[o * din + k];
                gw[o * din + k] += g * xd[i * din + k];
            }
        }
    }
    Ok((
        Tensor::new(&[n, din], gx)?,
        Tensor::new(&[dout, din], gw)?,
        Tensor::new(&[dout], gb)?,
    ))
}

fn axis_split<E: Element>(t: &Tensor<E>, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= t.rank() {
        return Err(Error::invalid(op, format!("axis {axis} out of range for {:?}", t.shape())));
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let mid = t.shape()[axis];
    let inner: usize = t.shape()[axis + 1..].iter().product();
    Ok((outer, mid, inner))
}

/// Normalizes each length-`d` slice along `axis` to zero mean and unit
/// population variance, then applies the per-channel affine
/// `gamma * xhat + beta`. The stabilizer sits under the square root:
/// `(x - mean) / sqrt(var + eps)`.
pub fn layer_norm<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
    axis: usize,
) -> Result<Tensor<E>> {
    let (outer, d, inner) = axis_split(x, axis, "layer_norm")?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("gamma/beta must be [{d}], got {:?}/{:?}", gamma.shape(), beta.shape()),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("layer_norm", "eps must be positive"));
    }
    let epse = E::from_f64(eps);
    let inv_d = E::ONE / E::from_f64(d as f64);
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![E::ZERO; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |c: usize| (o * d + c) * inner + i;
            let mut sum = E::ZERO;
            for c in 0..d {
                sum += xd[at(c)];
            }
            let mean = sum * inv_d;
            let mut var = E::ZERO;
            for c in 0..d {
                let dv = xd[at(c)] - mean;
                var += dv * dv;
            }
            var *= inv_d;
            let inv_sd = E::ONE / (var + epse).sqrt();
            for c in 0..d {
                out[at(c)] = gd[c] * ((xd[at(c)] - mean) * inv_sd) + bd[c];
            }
        }
    }
    let out = Tensor::new(x.shape(), out)?;
    ensure_finite(&out, "layer_norm")?;
    Ok(out)
}

/// Gradients of [`layer_norm`] with respect to input, gamma, and beta.
pub fn layer_norm_backward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    eps: f64,
    axis: usize,
    gout: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (outer, d, inner) = axis_split(x, axis, "layer_norm")?;
    let epse = E::from_f64(eps);
    let inv_d = E::ONE / E::from_f64(d as f64);
    let xd = x.data();
    let gmd = gamma.data();
    let gd = gout.data();
    let mut gx = vec![E::ZERO; x.numel()];
    let mut ggamma = vec![E::ZERO; d];
    let mut gbeta = vec![E::ZERO; d];
    let mut xhat = vec![E::ZERO; d];
    for o in 0..outer {
        for i in 0..inner {
            let at = |c: usize| (o * d + c) * inner + i;
            let mut sum = E::ZERO;
            for c in 0..d {
                sum += xd[at(c)];
            }
            let mean = sum * inv_d;
            let mut var = E::ZERO;
            for c in 0..d {
                let dv = xd[at(c)] - mean;
                var += dv * dv;
            }
            var *= inv_d;
            let inv_sd = E::ONE / (var + epse).sqrt();
            // ghat = gamma .* gout restricted to this slice
            let mut mean_ghat = E::ZERO;
            let mut mean_ghat_xhat = E::ZERO;
            for c in 0..d {
                xhat[c] = (xd[at(c)] - mean) * inv_sd;
                let ghat = gmd[c] * gd[at(c)];
                mean_ghat += ghat;
                mean_ghat_xhat += ghat * xhat[c];
            }
            mean_ghat *= inv_d;
            mean_ghat_xhat *= inv_d;
            for c in 0..d {
                let g = gd[at(c)];
                let ghat = gmd[c] * g;
                gx[at(c)] = (ghat - mean_ghat - xhat[c] * mean_ghat_xhat) * inv_sd;
                ggamma[c] += g * xhat[c];
                gbeta[c] += g;
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(&[d], ggamma)?,
        Tensor::new(&[d], gbeta)?,
    ))
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Exact (erf-based) GELU: `0.5 * x * (1 + erf(x / sqrt(2)))`.
pub fn gelu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let half = E::from_f64(0.5);
    let inv_sqrt2 = E::from_f64(INV_SQRT_2);
    x.map(|v| half * v * (E::ONE + (v * inv_sqrt2).erf()))
}

/// Derivative of [`gelu`]: `Phi(x) + x * phi(x)` with the standard normal
/// cdf and pdf.
pub fn gelu_backward<E: Element>(x: &Tensor<E>, gout: &Tensor<E>) -> Result<Tensor<E>> {
    let half = E::from_f64(0.5);
    let inv_sqrt2 = E::from_f64(INV_SQRT_2);
    let inv_sqrt_2pi = E::from_f64(INV_SQRT_2PI);
    let xd = x.data();
    let gd = gout.data();
    let data = (0..xd.len())
        .map(|i| {
            let v = xd[i];
            let cdf = half * (E::ONE + (v * inv_sqrt2).erf());
            let pdf = inv_sqrt_2pi * (-(half * v * v)).exp();
            gd[i] * (cdf + v * pdf)
        })
        .collect();
    Tensor::new(x.shape(), data)
}

/// Softmax along `axis`, stabilized by subtracting the slice maximum before
/// exponentiation. Slice sums accumulate in ascending index order.
pub fn softmax<E: Element>(x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    let (outer, d, inner) = axis_split(x, axis, "softmax")?;
    let xd = x.data();
    let mut out = vec![E::ZERO; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |c: usize| (o * d + c) * inner + i;
            let mut m = xd[at(0)];
            for c in 1..d {
                m = m.maximum(xd[at(c)]);
            }
            let mut sum = E::ZERO;
            for c in 0..d {
                let e = (xd[at(c)] - m).exp();
                out[at(c)] = e;
                sum += e;
            }
            for c in 0..d {
                out[at(c)] = out[at(c)] / sum;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Gradient of [`softmax`] given its own output `y`:
/// `gx = y .* (gout - sum(gout .* y))` per slice.
pub fn softmax_backward<E: Element>(
    y: &Tensor<E>,
    axis: usize,
    gout: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (outer, d, inner) = axis_split(y, axis, "softmax")?;
    let yd = y.data();
    let gd = gout.data();
    let mut gx = vec![E::ZERO; y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |c: usize| (o * d + c) * inner + i;
            let mut dot = E::ZERO;
            for c in 0..d {
                dot += gd[at(c)] * yd[at(c)];
            }
            for c in 0..d {
                gx[at(c)] = yd[at(c)] * (gd[at(c)] - dot);
            }
        }
    }
    Tensor::new(y.shape(), gx)
}

/// Elementwise maximum of two same-shape tensors. Ties resolve to the first
/// argument, and the gradient follows the same rule.
pub fn maxout<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "maxout",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &av)| if av >= bd[i] { av } else { bd[i] })
        .collect();
    Tensor::new(a.shape(), data)
}

/// Routes the output gradient to whichever input won; ties send it to `a`.
pub fn maxout_backward<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    gout: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let ad = a.data();
    let bd = b.data();
    let gd = gout.data();
    let mut ga = vec![E::ZERO; ad.len()];
    let mut gb = vec![E::ZERO; bd.len()];
    for i in 0..ad.len() {
        if ad[i] >= bd[i] {
            ga[i] = gd[i];
        } else {
            gb[i] = gd[i];
        }
    }
    Ok((Tensor::new(a.shape(), ga)?, Tensor::new(b.shape(), gb)?))
}

/// Mean over the spatial axes of `[N, C, H, W]`, accumulated row-major.
pub fn global_avg_pool<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    expect_rank(x, 4, "global_avg_pool", "input")?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let inv = E::ONE / E::from_f64((h * w) as f64);
    let xd = x.data();
    let mut out = vec![E::ZERO; n * c];
    for im in 0..n {
        for ch in 0..c {
            let base = (im * c + ch) * h * w;
            let mut sum = E::ZERO;
            for i in 0..h * w {
                sum += xd[base + i];
            }
            out[im * c + ch] = sum * inv;
        }
    }
    Tensor::new(&[n, c], out)
}

pub fn global_avg_pool_backward<E: Element>(
    x_shape: &[usize],
    gout: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let inv = E::ONE / E::from_f64((h * w) as f64);
    let gd = gout.data();
    let mut gx = vec![E::ZERO; n * c * h * w];
    for im in 0..n {
        for ch in 0..c {
            let g = gd[im * c + ch] * inv;
            let base = (im * c + ch) * h * w;
            for i in 0..h * w {
                gx[base + i] = g;
            }
        }
    }
    Tensor::new(x_shape, gx)
}

/// Repeats a per-channel vector `[N, C]` across an `h x w` grid.
pub fn broadcast_spatial<E: Element>(v: &Tensor<E>, h: usize, w: usize) -> Result<Tensor<E>> {
    expect_rank(v, 2, "broadcast_spatial", "input")?;
    if h == 0 || w == 0 {
        return Err(Error::invalid("broadcast_spatial", "spatial extents must be positive"));
    }
    let (n, c) = (v.shape()[0], v.shape()[1]);
    let vd = v.data();
    let mut out = vec![E::ZERO; n * c * h * w];
    for im in 0..n {
        for ch in 0..c {
            let val = vd[im * c + ch];
            let base = (im * c + ch) * h * w;
            for i in 0..h * w {
                out[base + i] = val;
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

pub fn broadcast_spatial_backward<E: Element>(gout: &Tensor<E>) -> Result<Tensor<E>> {
    conv2d_backward_bias(gout).and_then(|per_channel| {
        // conv bias backward sums over batch too; redo per sample instead
        let _ = per_channel;
        let (n, c, h, w) = (
            gout.shape()[0],
            gout.shape()[1],
            gout.shape()[2],
            gout.shape()[3],
        );
        let gd = gout.data();
        let mut gv = vec![E::ZERO; n * c];
        for im in 0..n {
            for ch in 0..c {
                let base = (im * c + ch) * h * w;
                let mut sum = E::ZERO;
                for i in 0..h * w {
                    sum += gd[base + i];
                }
                gv[im * c + ch] = sum;
            }
        }
        Tensor::new(&[n, c], gv)
    })
}

/// Per-group inner product of every token with a per-sample channel vector.
///
/// With channels split into `groups` contiguous blocks,
/// `out[n, g, i, j] = sum over channels c in block g of x[n, c, i, j] * v[n, c]`,
/// accumulated in ascending channel order.
pub fn group_dot<E: Element>(x: &Tensor<E>, v: &Tensor<E>, groups: usize) -> Result<Tensor<E>> {
    expect_rank(x, 4, "group_dot", "input")?;
    expect_rank(v, 2, "group_dot", "vector")?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if v.shape() != [n, c] {
        return Err(Error::shape(
            "group_dot",
            format!("vector shape {:?}, expected [{n}, {c}]", v.shape()),
        ));
    }
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(
            "group_dot",
            format!("channels {c} must divide into {groups} groups"),
        ));
    }
    let cg = c / groups;
    let xd = x.data();
    let vd = v.data();
    let mut out = vec![E::ZERO; n * groups * h * w];
    for im in 0..n {
        for g in 0..groups {
            let obase = (im * groups + g) * h * w;
            for i in 0..h * w {
                let mut acc = E::ZERO;
                for c0 in 0..cg {
                    let ch = g * cg + c0;
                    acc += xd[(im * c + ch) * h * w + i] * vd[im * c + ch];
                }
                out[obase + i] = acc;
            }
        }
    }
    let out = Tensor::new(&[n, groups, h, w], out)?;
    ensure_finite(&out, "group_dot")?;
    Ok(out)
}

pub fn group_dot_backward<E: Element>(
    x: &Tensor<E>,
    v: &Tensor<E>,
    groups: usize,
    gout: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cg = c / groups;
    let xd = x.data();
    let vd = v.data();
    let gd = gout.data();
    let mut gx = vec![E::ZERO; x.numel()];
    let mut gv = vec![E::ZERO; v.numel()];
    for im in 0..n {
        for ch in 0..c {
            let g = ch / cg;
            let gbase = (im * groups + g) * h * w;
            let xbase = (im * c + ch) * h * w;
            let mut acc = E::ZERO;
            for i in 0..h * w {
                let go = gd[gbase + i];
                gx[xbase + i] = go * vd[im * c + ch];
                acc += go * xd[xbase + i];
            }
            gv[im * c + ch] = acc;
        }
    }
    Ok((Tensor::new(x.shape(), gx)?, Tensor::new(v.shape(), gv)?))
}

/// Normalizes each `[H, W]` plane of `[N, G, H, W]` to zero mean and unit
/// spread, then applies per-group scalars: `alpha_g * (s - mean) / denom +
/// beta_g` with `denom = max(std, eps)` and the population standard
/// deviation over the plane. Clamping (rather than adding) `eps` keeps the
/// map exactly invariant to positive rescaling of `s` whenever the spread
/// is above `eps`, while still bounding the denominator for constant
/// planes.
pub fn spatial_group_norm<E: Element>(
    s: &Tensor<E>,
    alpha: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    expect_rank(s, 4, "spatial_group_norm", "input")?;
    let (n, g, h, w) = (s.shape()[0], s.shape()[1], s.shape()[2], s.shape()[3]);
    if alpha.shape() != [g] || beta.shape() != [g] {
        return Err(Error::shape(
            "spatial_group_norm",
            format!("alpha/beta must be [{g}], got {:?}/{:?}", alpha.shape(), beta.shape()),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("spatial_group_norm", "eps must be positive"));
    }
    let epse = E::from_f64(eps);
    let m = h * w;
    let inv_m = E::ONE / E::from_f64(m as f64);
    let sd = s.data();
    let ad = alpha.data();
    let bd = beta.data();
    let mut out = vec![E::ZERO; s.numel()];
    for im in 0..n {
        for gr in 0..g {
            let base = (im * g + gr) * m;
            let mut sum = E::ZERO;
            for i in 0..m {
                sum += sd[base + i];
            }
            let mean = sum * inv_m;
            let mut var = E::ZERO;
            for i in 0..m {
                let dv = sd[base + i] - mean;
                var += dv * dv;
            }
            var *= inv_m;
            let denom = var.sqrt().maximum(epse);
            for i in 0..m {
                out[base + i] = ad[gr] * ((sd[base + i] - mean) / denom) + bd[gr];
            }
        }
    }
    let out = Tensor::new(s.shape(), out)?;
    ensure_finite(&out, "spatial_group_norm")?;
    Ok(out)
}

/// Gradients of [`spatial_group_norm`]. Where the plane's spread exceeds
/// `eps` the denominator varies with the input (full normalization
/// backward); below it the denominator is the constant `eps` and the map is
/// affine in the plane.
pub fn spatial_group_norm_backward<E: Element>(
    s: &Tensor<E>,
    alpha: &Tensor<E>,
    eps: f64,
    gout: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (n, g, h, w) = (s.shape()[0], s.shape()[1], s.shape()[2], s.shape()[3]);
    let epse = E::from_f64(eps);
    let m = h * w;
    let inv_m = E::ONE / E::from_f64(m as f64);
    let sd = s.data();
    let ad = alpha.data();
    let gd = gout.data();
    let mut gs = vec![E::ZERO; s.numel()];
    let mut galpha = vec![E::ZERO; g];
    let mut gbeta = vec![E::ZERO; g];
    let mut z = vec![E::ZERO; m];
    for im in 0..n {
        for gr in 0..g {
            let base = (im * g + gr) * m;
            let mut sum = E::ZERO;
            for i in 0..m {
                sum += sd[base + i];
            }
            let mean = sum * inv_m;
            let mut var = E::ZERO;
            for i in 0..m {
                let dv = sd[base + i] - mean;
                var += dv * dv;
            }
            var *= inv_m;
            let std = var.sqrt();
            let clamped = std < epse;
            let denom = if clamped { epse } else { std };
            let mut mean_g = E::ZERO;
            let mut mean_gz = E::ZERO;
            for i in 0..m {
                z[i] = (sd[base + i] - mean) / denom;
                mean_g += gd[base + i];
                mean_gz += gd[base + i] * z[i];
                galpha[gr] += gd[base + i] * z[i];
                gbeta[gr] += gd[base + i];
            }
            mean_g *= inv_m;
            mean_gz *= inv_m;
            for i in 0..m {
                let centered = gd[base + i] - mean_g;
                let gs_i = if clamped {
                    ad[gr] * centered / denom
                } else {
                    ad[gr] * (centered - z[i] * mean_gz) / denom
                };
                gs[base + i] = gs_i;
            }
        }
    }
    Ok((
        Tensor::new(s.shape(), gs)?,
        Tensor::new(&[g], galpha)?,
        Tensor::new(&[g], gbeta)?,
    ))
}

/// Scales a per-sample channel vector by per-group spatial maps:
/// `out[n, c, i, j] = gc[n, c] * sim[n, group(c), i, j]` where `group(c)`
/// is the contiguous block of channels the similarity groups use.
pub fn modulate<E: Element>(gc: &Tensor<E>, sim: &Tensor<E>) -> Result<Tensor<E>> {
    expect_rank(gc, 2, "modulate", "context")?;
    expect_rank(sim, 4, "modulate", "similarity")?;
    let (n, c) = (gc.shape()[0], gc.shape()[1]);
    let (ns, g, h, w) = (sim.shape()[0], sim.shape()[1], sim.shape()[2], sim.shape()[3]);
    if ns != n || g == 0 || c % g != 0 {
        return Err(Error::shape(
            "modulate",
            format!("context [{n}, {c}] incompatible with similarity {:?}", sim.shape()),
        ));
    }
    let cg = c / g;
    let gcd = gc.data();
    let simd = sim.data();
    let mut out = vec![E::ZERO; n * c * h * w];
    for im in 0..n {
        for ch in 0..c {
            let gr = ch / cg;
            let sbase = (im * g + gr) * h * w;
            let obase = (im * c + ch) * h * w;
            let val = gcd[im * c + ch];
            for i in 0..h * w {
                out[obase + i] = val * simd[sbase + i];
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

pub fn modulate_backward<E: Element>(
    gc: &Tensor<E>,
    sim: &Tensor<E>,
    gout: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (n, c) = (gc.shape()[0], gc.shape()[1]);
    let (g, h, w) = (sim.shape()[1], sim.shape()[2], sim.shape()[3]);
    let cg = c / g;
    let gcd = gc.data();
    let simd = sim.data();
    let gd = gout.data();
    let mut ggc = vec![E::ZERO; gc.numel()];
    let mut gsim = vec![E::ZERO; sim.numel()];
    for im in 0..n {
        for ch in 0..c {
            let gr = ch / cg;
            let sbase = (im * g + gr) * h * w;
            let obase = (im * c + ch) * h * w;
            let mut acc = E::ZERO;
            for i in 0..h * w {
                let go = gd[obase + i];
                acc += go * simd[sbase + i];
                gsim[sbase + i] += go * gcd[im * c + ch];
            }
            ggc[im * c + ch] = acc;
        }
    }
    Ok((Tensor::new(gc.shape(), ggc)?, Tensor::new(sim.shape(), gsim)?))
}

/// Zero-pads the spatial axes of `[N, C, H, W]`; padding may differ per
/// side, which the overlapped patch embedding uses to keep strided outputs
/// exact.
pub fn pad_nchw<E: Element>(
    x: &Tensor<E>,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Result<Tensor<E>> {
    expect_rank(x, 4, "pad_nchw", "input")?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (h + top + bottom, w + left + right);
    let xd = x.data();
    let mut out = vec![E::ZERO; n * c * ho * wo];
    for im in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let src = ((im * c + ch) * h + y) * w;
                let dst = ((im * c + ch) * ho + y + top) * wo + left;
                out[dst..dst + w].copy_from_slice(&xd[src..src + w]);
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

/// Inverse of [`pad_nchw`]: crops the padded border back off (the gradient
/// of padding).
pub fn crop_nchw<E: Element>(
    x: &Tensor<E>,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Result<Tensor<E>> {
    expect_rank(x, 4, "crop_nchw", "input")?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if top + bottom >= h || left + right >= w {
        return Err(Error::invalid("crop_nchw", "crop larger than input"));
    }
    let (ho, wo) = (h - top - bottom, w - left - right);
    let xd = x.data();
    let mut out = vec![E::ZERO; n * c * ho * wo];
    for im in 0..n {
        for ch in 0..c {
            for y in 0..ho {
                let src = ((im * c + ch) * h + y + top) * w + left;
                let dst = ((im * c + ch) * ho + y) * wo;
                out[dst..dst + wo].copy_from_slice(&xd[src..src + wo]);
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

/// Mean softmax cross-entropy of `[N, K]` logits against integer labels,
/// computed through a max-shifted log-sum-exp.
pub fn cross_entropy_logits<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> Result<Tensor<E>> {
    expect_rank(logits, 2, "cross_entropy", "logits")?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    let ld = logits.data();
    let mut total = E::ZERO;
    for i in 0..n {
        if labels[i] >= k {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {} out of range for {k} classes", labels[i]),
            ));
        }
        let row = &ld[i * k..(i + 1) * k];
        let mut m = row[0];
        for &v in &row[1..] {
            m = m.maximum(v);
        }
        let mut sum = E::ZERO;
        for &v in row {
            sum += (v - m).exp();
        }
        let lse = m + sum.ln();
        total += lse - row[labels[i]];
    }
    let loss = total / E::from_f64(n as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy"));
    }
    Ok(Tensor::scalar(loss))
}

/// Gradient of [`cross_entropy_logits`]: `(softmax(row) - onehot) / N`.
pub fn cross_entropy_backward<E: Element>(
    logits: &Tensor<E>,
    labels: &[usize],
    gout: E,
) -> Result<Tensor<E>> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let probs = softmax(logits, 1)?;
    let inv_n = E::ONE / E::from_f64(n as f64);
    let mut gx = probs.into_data();
    for i in 0..n {
        gx[i * k + labels[i]] -= E::ONE;
    }
    for v in gx.iter_mut() {
        *v = *v * inv_n * gout;
    }
    Tensor::new(logits.shape(), gx)
}

/// Elementwise sum of two same-shape tensors.
pub fn add<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let bd = b.data();
    let data = a.data().iter().enumerate().map(|(i, &v)| v + bd[i]).collect();
    Tensor::new(a.shape(), data)
}

/// Elementwise product of two same-shape tensors.
pub fn mul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let bd = b.data();
    let data = a.data().iter().enumerate().map(|(i, &v)| v * bd[i]).collect();
    Tensor::new(a.shape(), data)
}

pub fn scale<E: Element>(x: &Tensor<E>, factor: E) -> Tensor<E> {
    x.map(|v| v * factor)
}

/// Sum of all elements, ascending index order, as a `[1]` tensor.
pub fn sum_all<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let mut acc = E::ZERO;
    for &v in x.data() {
        acc += v;
    }
    Tensor::scalar(acc)
}

/// Mean of all elements as a `[1]` tensor.
pub fn mean_all<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let mut acc = E::ZERO;
    for &v in x.data() {
        acc += v;
    }
    Tensor::scalar(acc / E::from_f64(x.numel() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::trunc_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t<E: Element>(shape: &[usize], data: Vec<E>) -> Tensor<E> {
        Tensor::new(shape, data).expect("test tensor shape must match data")
    }

    #[test]
    fn conv2d_ones_kernel_counts_taps() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let spec = ConvSpec::depthwise(1, 3);
        let y = conv2d(&x, &w, None, &spec).expect("conv should succeed");
        assert_eq!(y.shape(), &[1, 1, 3, 3], "same padding must preserve extent");
        let d = y.data();
        assert_eq!(d[4], 9.0, "center output must sum all nine taps");
        assert_eq!(d[1], 6.0, "edge output must sum six in-bounds taps");
        assert_eq!(d[0], 4.0, "corner output must sum four in-bounds taps");
    }

    #[test]
    fn conv2d_grouped_splits_channels() {
        let x = t(&[1, 2, 1, 1], vec![3.0, 5.0]);
        let w = t(&[2, 1, 1, 1], vec![2.0, 7.0]);
        let spec = ConvSpec {
            in_channels: 2,
            out_channels: 2,
            kernel: 1,
            stride: 1,
            padding: 0,
            groups: 2,
        };
        let y = conv2d(&x, &w, None, &spec).expect("grouped conv should succeed");
        assert_eq!(y.data(), &[6.0, 35.0], "each group must only see its own channel");
    }

    #[test]
    fn conv2d_stride_downsamples_exactly() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel: 2,
            stride: 2,
            padding: 0,
            groups: 1,
        };
        let w = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &w, None, &spec).expect("strided conv should succeed");
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[10.0, 18.0, 42.0, 50.0], "2x2 windows must not overlap");
    }

    #[test]
    fn conv2d_rejects_fractional_output() {
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel: 2,
            stride: 2,
            padding: 0,
            groups: 1,
        };
        assert!(spec.out_extent(5).is_err(), "5 is not tileable by stride-2 2x2 windows");
    }

    #[test]
    fn matmul_small_case() {
        let a = t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = matmul(&a, &b).expect("matmul should succeed");
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn linear_matches_matmul_with_transposed_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Tensor<f64> = trunc_normal(&[3, 5], 1.0, &mut rng);
        let w: Tensor<f64> = trunc_normal(&[4, 5], 1.0, &mut rng);
        let via_linear = linear(&x, &w, None).expect("linear should succeed");
        let wt = transpose2(&w).expect("transpose should succeed");
        let via_matmul = matmul(&x, &wt).expect("matmul should succeed");
        for (a, b) in via_linear.data().iter().zip(via_matmul.data()) {
            assert!((a - b).abs() < 1e-12, "linear and x*W^T disagree: {a} vs {b}");
        }
    }

    #[test]
    fn layer_norm_standardizes_a_known_slice() {
        let x = t(&[1, 3], vec![1.0, 2.0, 3.0]);
        let gamma = Tensor::full(&[3], 1.0);
        let beta = Tensor::full(&[3], 0.0);
        let y = layer_norm(&x, &gamma, &beta, 1e-12, 1).expect("layer_norm should succeed");
        let expect = 1.224744871391589;
        assert!((y.data()[0] + expect).abs() < 1e-9, "low value must map near -sqrt(3/2)");
        assert!(y.data()[1].abs() < 1e-12, "middle value must map to zero");
        assert!((y.data()[2] - expect).abs() < 1e-9, "high value must map near sqrt(3/2)");
    }

    #[test]
    fn layer_norm_normalizes_channel_axis_of_nchw() {
        let x = Tensor::<f64>::from_fn(&[2, 4, 3, 3], |i| (i % 17) as f64);
        let gamma = Tensor::full(&[4], 1.0);
        let beta = Tensor::full(&[4], 0.0);
        let y = layer_norm(&x, &gamma, &beta, 1e-12, 1).expect("layer_norm should succeed");
        // every (sample, pixel) column across channels must be standardized
        let (c, hw) = (4, 9);
        for im in 0..2 {
            for px in 0..hw {
                let mut mean = 0.0;
                for ch in 0..c {
                    mean += y.data()[(im * c + ch) * hw + px];
                }
                mean /= c as f64;
                assert!(mean.abs() < 1e-9, "channel mean at pixel {px} is {mean}");
            }
        }
    }

    #[test]
    fn gelu_matches_reference_points() {
        let x = t(&[3], vec![0.0, 1.0, -1.0]);
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0, "gelu(0) must be exactly 0");
        assert!((y.data()[1] - 0.8413447460685429).abs() < 1e-12);
        assert!((y.data()[2] + 0.15865525393145707).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_reference_and_sums_to_one() {
        let x = t(&[1, 3], vec![1.0, 2.0, 3.0]);
        let y = softmax(&x, 1).expect("softmax should succeed");
        let expect = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "softmax value {a} differs from {b}");
        }
        let sum: f64 = y.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "softmax row must sum to one");
    }

    #[test]
    fn softmax_is_shift_invariant_even_for_large_inputs() {
        let x = t(&[1, 3], vec![1000.0, 1001.0, 1002.0]);
        let y = softmax(&x, 1).expect("softmax must not overflow");
        let small = t(&[1, 3], vec![0.0, 1.0, 2.0]);
        let ys = softmax(&small, 1).expect("softmax should succeed");
        for (a, b) in y.data().iter().zip(ys.data()) {
            assert!((a - b).abs() < 1e-12, "shifting logits must not change softmax");
        }
    }

    #[test]
    fn maxout_ties_resolve_to_first_argument() {
        let a = t(&[2], vec![1.0, 5.0]);
        let b = t(&[2], vec![1.0, 3.0]);
        let y = maxout(&a, &b).expect("maxout should succeed");
        assert_eq!(y.data(), &[1.0, 5.0]);
        let g = t(&[2], vec![10.0, 20.0]);
        let (ga, gb) = maxout_backward(&a, &b, &g).expect("backward should succeed");
        assert_eq!(ga.data(), &[10.0, 20.0], "tie must route gradient to first argument");
        assert_eq!(gb.data(), &[0.0, 0.0]);
    }

    #[test]
    fn global_avg_pool_means_each_plane() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let y = global_avg_pool(&x).expect("pool should succeed");
        assert_eq!(y.data(), &[1.5, 5.5]);
    }

    #[test]
    fn group_dot_single_group_matches_full_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Tensor<f64> = trunc_normal(&[2, 6, 2, 2], 1.0, &mut rng);
        let v: Tensor<f64> = trunc_normal(&[2, 6], 1.0, &mut rng);
        let one = group_dot(&x, &v, 1).expect("group_dot should succeed");
        for im in 0..2 {
            for px in 0..4 {
                let mut acc = 0.0;
                for ch in 0..6 {
                    acc += x.data()[(im * 6 + ch) * 4 + px] * v.data()[im * 6 + ch];
                }
                let got = one.data()[im * 4 + px];
                assert_eq!(got, acc, "g=1 must equal the plain inner product bit for bit");
            }
        }
    }

    #[test]
    fn group_dot_groups_partition_channels() {
        let x = t(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let v = t(&[1, 4], vec![10.0, 20.0, 30.0, 40.0]);
        let y = group_dot(&x, &v, 2).expect("group_dot should succeed");
        assert_eq!(y.data(), &[50.0, 250.0], "each group must dot only its own block");
    }

    #[test]
    fn spatial_group_norm_is_invariant_to_positive_rescale() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s: Tensor<f64> = trunc_normal(&[1, 2, 4, 4], 1.0, &mut rng);
        let alpha = t(&[2], vec![1.3, 0.7]);
        let beta = t(&[2], vec![0.1, -0.2]);
        let base = spatial_group_norm(&s, &alpha, &beta, 1e-5).expect("norm should succeed");
        let scaled = spatial_group_norm(&scale(&s, 100.0), &alpha, &beta, 1e-5)
            .expect("norm should succeed");
        for (a, b) in base.data().iter().zip(scaled.data()) {
            assert!((a - b).abs() < 1e-9, "positive rescale must not change output: {a} vs {b}");
        }
    }

    #[test]
    fn spatial_group_norm_clamps_constant_planes() {
        let s = Tensor::<f64>::full(&[1, 1, 3, 3], 4.2);
        let alpha = t(&[1], vec![2.0]);
        let beta = t(&[1], vec![0.5]);
        let y = spatial_group_norm(&s, &alpha, &beta, 1e-5).expect("norm should succeed");
        for &v in y.data() {
            assert_eq!(v, 0.5, "constant plane must pass through as beta");
        }
    }

    #[test]
    fn modulate_broadcasts_groups_over_channel_blocks() {
        let gc = t(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let sim = t(&[1, 2, 1, 2], vec![10.0, 20.0, 30.0, 40.0]);
        let y = modulate(&gc, &sim).expect("modulate should succeed");
        assert_eq!(
            y.data(),
            &[10.0, 20.0, 20.0, 40.0, 90.0, 120.0, 120.0, 160.0],
            "channels in the same group must share a similarity plane"
        );
    }

    #[test]
    fn pad_then_crop_round_trips() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 4], |i| i as f64);
        let padded = pad_nchw(&x, 1, 2, 3, 0).expect("pad should succeed");
        assert_eq!(padded.shape(), &[1, 2, 6, 7]);
        let back = crop_nchw(&padded, 1, 2, 3, 0).expect("crop should succeed");
        assert!(back.bit_eq(&x), "crop must invert pad exactly");
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_k() {
        let logits = Tensor::<f64>::zeros(&[5, 4]);
        let loss = cross_entropy_logits(&logits, &[0, 1, 2, 3, 0]).expect("loss should succeed");
        assert!((loss.data()[0] - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero_per_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits: Tensor<f64> = trunc_normal(&[3, 5], 1.0, &mut rng);
        let g = cross_entropy_backward(&logits, &[1, 0, 4], 1.0).expect("backward should succeed");
        for i in 0..3 {
            let row: f64 = g.data()[i * 5..(i + 1) * 5].iter().sum();
            assert!(row.abs() < 1e-12, "softmax-minus-onehot rows must sum to zero");
        }
    }

    #[test]
    fn non_finite_accumulation_is_reported() {
        let x = Tensor::<f64>::full(&[1, 1, 1, 1], f64::MAX);
        let w = Tensor::<f64>::full(&[1, 1, 1, 1], 2.0);
        let spec = ConvSpec::pointwise(1, 1);
        let err = conv2d(&x, &w, None, &spec).expect_err("overflow must surface as an error");
        assert!(matches!(err, Error::NonFinite("conv2d")));
    }
}
