//! Forward kernels and their adjoints. Everything here is pure and operates
//! on owned or borrowed `Tensor`s; the tape in `graph` calls into these.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::tensor_core::Tensor;

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output length equals input length. Odd kernels pad symmetrically;
    /// even kernels put the extra zero on the right.
    Same,
    Valid,
}

impl Padding {
    /// (left pad, output length) for an input of length `len` and kernel `size`.
    fn geometry(self, len: usize, size: usize) -> Result<(usize, usize)> {
        match self {
            Padding::Same => Ok(((size - 1) / 2, len)),
            Padding::Valid => {
                if size > len {
                    return Err(Error::shape(
                        "conv1d",
                        format!("kernel size {size} exceeds input length {len} with valid padding"),
                    ));
                }
                Ok((0, len - size + 1))
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub size: usize,
    pub len: usize,
    pub out_len: usize,
    pub pad_left: usize,
}

impl ConvDims {
    /// Output positions `t` for which tap `s` reads inside the input.
    #[inline]
    fn tap_range(&self, s: usize) -> (usize, usize) {
        let lo = self.pad_left.saturating_sub(s);
        let hi = (self.len + self.pad_left).saturating_sub(s).min(self.out_len);
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv_dims(input: &Tensor, weight: &Tensor, padding: Padding) -> Result<ConvDims> {
    input.expect_rank(3, "conv1d", "input [N, Cin, T]")?;
    weight.expect_rank(3, "conv1d", "weight [Cout, Cin, S]")?;
    let (cin, len) = (input.dim(1), input.dim(2));
    let (cout, wcin, size) = (weight.dim(0), weight.dim(1), weight.dim(2));
    if wcin != cin {
        return Err(Error::shape(
            "conv1d",
            format!("input channel axis (axis 1) is {cin} but weight input-channel axis (axis 1) is {wcin}"),
        ));
    }
    if size == 0 {
        return Err(Error::shape("conv1d", "kernel axis (axis 2) has size 0"));
    }
    let (pad_left, out_len) = padding.geometry(len, size)?;
    Ok(ConvDims {
        cin,
        cout,
        size,
        len,
        out_len,
        pad_left,
    })
}

fn check_bias(bias: Option<&Tensor>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::shape(
                "conv1d",
                format!("bias has {} entries but weight output-channel axis (axis 0) is {cout}", b.numel()),
            ));
        }
    }
    Ok(())
}

/// Single-sample cross-correlation: `x` is [Cin, T], `out` is [Cout, T'].
pub(crate) fn conv_sample(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    d: &ConvDims,
    out: &mut [f64],
) {
    for co in 0..d.cout {
        let orow = &mut out[co * d.out_len..(co + 1) * d.out_len];
        let b = bias.map_or(0.0, |b| b[co]);
        orow.iter_mut().for_each(|v| *v = b);
        for ci in 0..d.cin {
            let xrow = &x[ci * d.len..(ci + 1) * d.len];
            let wrow = &weight[(co * d.cin + ci) * d.size..(co * d.cin + ci + 1) * d.size];
            for (s, &w) in wrow.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let (lo, hi) = d.tap_range(s);
                let shift = s as isize - d.pad_left as isize;
                let xs = &xrow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                for (o, &xv) in orow[lo..hi].iter_mut().zip(xs) {
                    *o += w * xv;
                }
            }
        }
    }
}

/// Adjoint of `conv_sample`. Accumulates into `gx`, `gw`, `gb`.
pub(crate) fn conv_sample_backward(
    x: &[f64],
    weight: &[f64],
    gout: &[f64],
    d: &ConvDims,
    gx: &mut [f64],
    gw: &mut [f64],
    gb: Option<&mut [f64]>,
) {
    if let Some(gb) = gb {
        for co in 0..d.cout {
            gb[co] += gout[co * d.out_len..(co + 1) * d.out_len].iter().sum::<f64>();
        }
    }
    for co in 0..d.cout {
        let grow = &gout[co * d.out_len..(co + 1) * d.out_len];
        for ci in 0..d.cin {
            let xrow = &x[ci * d.len..(ci + 1) * d.len];
            let gxrow = &mut gx[ci * d.len..(ci + 1) * d.len];
            let base = (co * d.cin + ci) * d.size;
            for s in 0..d.size {
                let (lo, hi) = d.tap_range(s);
                let shift = s as isize - d.pad_left as isize;
                let a = (lo as isize + shift) as usize;
                let b = (hi as isize + shift) as usize;
                let w = weight[base + s];
                let mut acc = 0.0;
                for ((g, &xv), gxv) in grow[lo..hi].iter().zip(&xrow[a..b]).zip(&mut gxrow[a..b]) {
                    acc += g * xv;
                    *gxv += w * g;
                }
                gw[base + s] += acc;
            }
        }
    }
}

/// 1-D cross-correlation over a batch: input [N, Cin, T], weight [Cout, Cin, S].
pub fn conv1d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    padding: Padding,
) -> Result<Tensor> {
    let d = conv_dims(input, weight, padding)?;
    check_bias(bias, d.cout)?;
    let n = input.dim(0);
    let mut out = Tensor::zeros(&[n, d.cout, d.out_len]);
    for i in 0..n {
        conv_sample(
            input.row(i),
            weight.data(),
            bias.map(|b| b.data()),
            &d,
            out.row_mut(i),
        );
    }
    Ok(out)
}

/// Gradients of `conv1d` with respect to input, weight and bias.
pub fn conv1d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    padding: Padding,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = conv_dims(input, weight, padding)?;
    let n = input.dim(0);
    let mut gx = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[d.cout]);
    for i in 0..n {
        conv_sample_backward(
            input.row(i),
            weight.data(),
            grad_out.row(i),
            &d,
            gx.row_mut(i),
            gw.data_mut(),
            Some(gb.data_mut()),
        );
    }
    Ok((gx, gw, gb))
}

/// Normalized values and per-slice inverse standard deviations saved for the adjoint.
pub(crate) struct NormSaved {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

pub(crate) fn instance_norm_saved(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormSaved)> {
    input.expect_rank(3, "instance_norm", "input [N, C, T]")?;
    let (n, c, t) = (input.dim(0), input.dim(1), input.dim(2));
    if t < 2 {
        return Err(Error::invalid(
            "instance_norm",
            format!("time axis (axis 2) has length {t}; at least 2 required"),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("instance_norm", format!("eps must be positive, got {eps}")));
    }
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::shape(
            "instance_norm",
            format!(
                "channel axis (axis 1) is {c} but gamma has {} and beta {} entries",
                gamma.numel(),
                beta.numel()
            ),
        ));
    }
    let mut xhat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    let mut inv_std = Vec::with_capacity(n * c);
    for slice in 0..n * c {
        let ch = slice % c;
        let x = &input.data()[slice * t..(slice + 1) * t];
        let mean = x.iter().sum::<f64>() / t as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        let xh = &mut xhat.data_mut()[slice * t..(slice + 1) * t];
        for (h, &v) in xh.iter_mut().zip(x) {
            *h = (v - mean) * inv;
        }
        let o = &mut out.data_mut()[slice * t..(slice + 1) * t];
        for (o, &h) in o.iter_mut().zip(xhat.data()[slice * t..(slice + 1) * t].iter()) {
            *o = g * h + b;
        }
    }
    Ok((out, NormSaved { xhat, inv_std }))
}

/// Per-(sample, channel) normalization over time with population variance,
/// followed by a per-channel affine map.
pub fn instance_norm(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    instance_norm_saved(input, gamma, beta, eps).map(|(out, _)| out)
}

/// Returns (grad input, grad gamma, grad beta).
pub(crate) fn instance_norm_backward(
    saved: &NormSaved,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let shape = saved.xhat.shape();
    let (c, t) = (shape[1], shape[2]);
    let mut gx = Tensor::zeros(shape);
    let mut gg = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    for (slice, &inv) in saved.inv_std.iter().enumerate() {
        let ch = slice % c;
        let range = slice * t..(slice + 1) * t;
        let dy = &grad_out.data()[range.clone()];
        let xh = &saved.xhat.data()[range.clone()];
        let g = gamma.data()[ch];
        let mut sum_dy = 0.0;
        let mut sum_dy_xh = 0.0;
        for (&d, &h) in dy.iter().zip(xh) {
            sum_dy += d;
            sum_dy_xh += d * h;
        }
        gg.data_mut()[ch] += sum_dy_xh;
        gb.data_mut()[ch] += sum_dy;
        let mean_dxh = g * sum_dy / t as f64;
        let mean_dxh_xh = g * sum_dy_xh / t as f64;
        for ((o, &d), &h) in gx.data_mut()[range].iter_mut().zip(dy).zip(xh) {
            *o = inv * (g * d - mean_dxh - h * mean_dxh_xh);
        }
    }
    (gx, gg, gb)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(input: &Tensor) -> Tensor {
    input.map(|x| x * normal_cdf(x))
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Softmax along the last axis, stabilized by subtracting the slice maximum.
pub fn softmax(input: &Tensor) -> Result<Tensor> {
    let k = *input
        .shape()
        .last()
        .ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
    if k == 0 {
        return Err(Error::shape("softmax", "last axis has size 0"));
    }
    let mut out = input.clone();
    for slice in out.data_mut().chunks_mut(k) {
        let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in slice.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in slice.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Adjoint of softmax given its output `y`.
pub(crate) fn softmax_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let k = *y.shape().last().unwrap();
    let mut gx = Tensor::zeros(y.shape());
    for ((gxs, ys), gs) in gx
        .data_mut()
        .chunks_mut(k)
        .zip(y.data().chunks(k))
        .zip(grad_out.data().chunks(k))
    {
        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
        for ((o, &yv), &g) in gxs.iter_mut().zip(ys).zip(gs) {
            *o = yv * (g - dot);
        }
    }
    gx
}

/// `input [N, D] x weight[O, D]^T + bias[O]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    input.expect_rank(2, "linear", "input [N, D]")?;
    weight.expect_rank(2, "linear", "weight [O, D]")?;
    let (n, d) = (input.dim(0), input.dim(1));
    let (o, wd) = (weight.dim(0), weight.dim(1));
    if wd != d {
        return Err(Error::shape(
            "linear",
            format!("input feature axis (axis 1) is {d} but weight axis 1 is {wd}"),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != o {
            return Err(Error::shape(
                "linear",
                format!("bias has {} entries, expected {o}", b.numel()),
            ));
        }
    }
    let mut out = Tensor::zeros(&[n, o]);
    for i in 0..n {
        let x = input.row(i);
        for j in 0..o {
            let w = weight.row(j);
            let mut acc = bias.map_or(0.0, |b| b.data()[j]);
            for (a, b) in x.iter().zip(w) {
                acc += a * b;
            }
            out.data_mut()[i * o + j] = acc;
        }
    }
    Ok(out)
}

/// Mean over the last axis of a rank-3 tensor: [N, C, T] -> [N, C].
pub fn mean_over_time(input: &Tensor) -> Result<Tensor> {
    input.expect_rank(3, "mean_over_time", "input [N, C, T]")?;
    let (n, c, t) = (input.dim(0), input.dim(1), input.dim(2));
    let data = input
        .data()
        .chunks(t)
        .map(|s| s.iter().sum::<f64>() / t as f64)
        .collect();
    Tensor::from_vec(vec![n, c], data)
}
