//! Numeric kernels with hand-derived gradients.
//!
//! Convolutions are valid-only: an output cell at `(y, x)` reads exactly the
//! input window starting at `(y * stride, x * stride)`. That is what makes a
//! crop of a large feature map identical to the embedding of the matching
//! image sub-window.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{dim, Error, Result};
use crate::tensor::Tensor;

fn kernel_dims(kernels: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *kernels.shape() {
        [o, c, kh, kw] => Ok((o, c, kh, kw)),
        _ => Err(dim(op, format!("kernels must be rank-4, got {:?}", kernels.shape()))),
    }
}

/// Output extent of a valid convolution, or `None` when the kernel does not fit.
pub fn valid_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > input {
        None
    } else {
        Some((input - kernel) / stride + 1)
    }
}

pub fn conv_macs(c_in: usize, c_out: usize, kh: usize, kw: usize, oh: usize, ow: usize) -> u64 {
    (c_in * c_out * kh * kw) as u64 * (oh * ow) as u64
}

/// Valid 2-D convolution (cross-correlation orientation, no kernel flip).
///
/// `input` is `[C_in, H, W]`, `kernels` is `[C_out, C_in, kh, kw]`.
pub fn conv2d_valid(input: &Tensor, kernels: &Tensor, stride: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw("conv2d_valid")?;
    let (o, kc, kh, kw) = kernel_dims(kernels, "conv2d_valid")?;
    if kc != c {
        return Err(dim(
            "conv2d_valid",
            format!("input channels (axis 0) = {} but kernel channels (axis 1) = {}", c, kc),
        ));
    }
    if stride == 0 {
        return Err(Error::Argument("conv2d_valid: stride must be >= 1".into()));
    }
    let (oh, ow) = match (valid_extent(h, kh, stride), valid_extent(w, kw, stride)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(dim(
                "conv2d_valid",
                format!("kernel {}x{} larger than input {}x{} (axes 1, 2)", kh, kw, h, w),
            ))
        }
    };
    let out = conv_forward_raw(input.data(), (c, h, w), kernels.data(), (o, kh, kw), stride, (oh, ow));
    let out = Tensor::new(vec![o, oh, ow], out)?;
    out.ensure_finite("conv2d_valid")?;
    Ok(out)
}

fn conv_forward_raw(
    input: &[f64],
    (c, h, w): (usize, usize, usize),
    kernels: &[f64],
    (o, kh, kw): (usize, usize, usize),
    stride: usize,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        let out_plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..c {
            let in_plane = &input[ic * h * w..(ic + 1) * h * w];
            let kbase = (oc * c + ic) * kh * kw;
            for u in 0..kh {
                for v in 0..kw {
                    let wv = kernels[kbase + u * kw + v];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..oh {
                        let in_row = &in_plane[(y * stride + u) * w..];
                        let out_row = &mut out_plane[y * ow..(y + 1) * ow];
                        if stride == 1 {
                            for (dst, src) in out_row.iter_mut().zip(&in_row[v..v + ow]) {
                                *dst += wv * src;
                            }
                        } else {
                            for (x, dst) in out_row.iter_mut().enumerate() {
                                *dst += wv * in_row[x * stride + v];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of a valid convolution with respect to its input, given the
/// upstream gradient `grad_out` (`[C_out, H', W']`).
pub fn conv2d_grad_input(
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor> {
    let (o, c, kh, kw) = kernel_dims(kernels, "conv2d_grad_input")?;
    let (go, oh, ow) = grad_out.chw("conv2d_grad_input")?;
    if go != o {
        return Err(dim("conv2d_grad_input", format!("grad channels {} vs kernels {}", go, o)));
    }
    if (oh - 1) * stride + kh > in_h || (ow - 1) * stride + kw > in_w {
        return Err(dim("conv2d_grad_input", format!("output {}x{} does not fit input {}x{}", oh, ow, in_h, in_w)));
    }
    let k = kernels.data();
    let g = grad_out.data();
    let mut gin = vec![0.0; c * in_h * in_w];
    for oc in 0..o {
        let g_plane = &g[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..c {
            let in_plane = &mut gin[ic * in_h * in_w..(ic + 1) * in_h * in_w];
            let kbase = (oc * c + ic) * kh * kw;
            for u in 0..kh {
                for v in 0..kw {
                    let wv = k[kbase + u * kw + v];
                    for y in 0..oh {
                        let row = (y * stride + u) * in_w;
                        for x in 0..ow {
                            in_plane[row + x * stride + v] += wv * g_plane[y * ow + x];
                        }
                    }
                }
            }
        }
    }
    let gin = Tensor::new(vec![c, in_h, in_w], gin)?;
    gin.ensure_finite("conv2d_grad_input")?;
    Ok(gin)
}

/// Gradient of a valid convolution with respect to its kernels.
pub fn conv2d_grad_kernels(
    input: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    kh: usize,
    kw: usize,
) -> Result<Tensor> {
    let (c, h, w) = input.chw("conv2d_grad_kernels")?;
    let (o, oh, ow) = grad_out.chw("conv2d_grad_kernels")?;
    if (oh - 1) * stride + kh > h || (ow - 1) * stride + kw > w {
        return Err(dim("conv2d_grad_kernels", format!("output {}x{} does not fit input {}x{}", oh, ow, h, w)));
    }
    let x = input.data();
    let g = grad_out.data();
    let mut gk = vec![0.0; o * c * kh * kw];
    for oc in 0..o {
        let g_plane = &g[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..c {
            let in_plane = &x[ic * h * w..(ic + 1) * h * w];
            let kbase = (oc * c + ic) * kh * kw;
            for u in 0..kh {
                for v in 0..kw {
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let row = (y * stride + u) * w;
                        for xx in 0..ow {
                            acc += g_plane[y * ow + xx] * in_plane[row + xx * stride + v];
                        }
                    }
                    gk[kbase + u * kw + v] = acc;
                }
            }
        }
    }
    let gk = Tensor::new(vec![o, c, kh, kw], gk)?;
    gk.ensure_finite("conv2d_grad_kernels")?;
    Ok(gk)
}

/// Transposed (fractionally strided) convolution, the adjoint of
/// [`conv2d_valid`]. `kernels` is `[C_in, C_out, k, k]`; output extent is
/// `(H - 1) * stride + k`.
pub fn conv_transpose2d(input: &Tensor, kernels: &Tensor, stride: usize) -> Result<Tensor> {
    let (_, h, w) = input.chw("conv_transpose2d")?;
    let (_, _, kh, kw) = kernel_dims(kernels, "conv_transpose2d")?;
    if stride == 0 || h == 0 || w == 0 {
        return Err(Error::Argument("conv_transpose2d: empty input or zero stride".into()));
    }
    conv2d_grad_input(kernels, input, stride, (h - 1) * stride + kh, (w - 1) * stride + kw)
}

/// Returns `(grad_input, grad_kernels)` for [`conv_transpose2d`].
pub fn conv_transpose2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (_, _, kh, kw) = kernel_dims(kernels, "conv_transpose2d_backward")?;
    let gin = conv2d_valid(grad_out, kernels, stride)?;
    let gk = conv2d_grad_kernels(grad_out, input, stride, kh, kw)?;
    Ok((gin, gk))
}

/// Dense cross-correlation of a template over a search feature map, plus a
/// constant offset added at every position.
///
/// `template` is `[C, k, k']`, `search` is `[C, H, W]`; the result is
/// `[H - k + 1, W - k' + 1]`.
pub fn cross_correlate(template: &Tensor, search: &Tensor, offset: f64) -> Result<Tensor> {
    let (tc, th, tw) = template.chw("cross_correlate")?;
    let (sc, sh, sw) = search.chw("cross_correlate")?;
    if tc != sc {
        return Err(dim(
            "cross_correlate",
            format!("template has {} channels, search has {}", tc, sc),
        ));
    }
    if th > sh || tw > sw {
        return Err(dim(
            "cross_correlate",
            format!("template {}x{} larger than search {}x{}", th, tw, sh, sw),
        ));
    }
    let (oh, ow) = (sh - th + 1, sw - tw + 1);
    let mut out = conv_forward_raw(search.data(), (sc, sh, sw), template.data(), (1, th, tw), 1, (oh, ow));
    if offset != 0.0 {
        for v in &mut out {
            *v += offset;
        }
    }
    let out = Tensor::new(vec![oh, ow], out)?;
    out.ensure_finite("cross_correlate")?;
    Ok(out)
}

/// Returns `(grad_template, grad_search)` for [`cross_correlate`].
pub fn cross_correlate_backward(
    template: &Tensor,
    search: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (tc, th, tw) = template.chw("cross_correlate_backward")?;
    let (_, sh, sw) = search.chw("cross_correlate_backward")?;
    let g = grad_out.clone().reshape(&[1, sh - th + 1, sw - tw + 1])?;
    let gt = conv2d_grad_kernels(search, &g, 1, th, tw)?.reshape(&[tc, th, tw])?;
    let kernels = template.clone().reshape(&[1, tc, th, tw])?;
    let gs = conv2d_grad_input(&kernels, &g, 1, sh, sw)?;
    Ok((gt, gs))
}

/// Adds `bias[c]` to every element of channel `c`.
pub fn add_channel_bias(x: &mut Tensor, bias: &Tensor) -> Result<()> {
    let (c, h, w) = x.chw("add_channel_bias")?;
    if bias.len() != c {
        return Err(dim("add_channel_bias", format!("{} channels vs {} biases", c, bias.len())));
    }
    let b = bias.data().to_vec();
    for (plane, bv) in x.data_mut().chunks_mut(h * w).zip(b) {
        for v in plane {
            *v += bv;
        }
    }
    Ok(())
}

pub fn channel_bias_grad(grad_out: &Tensor) -> Result<Tensor> {
    let (c, h, w) = grad_out.chw("channel_bias_grad")?;
    let sums = grad_out.data().chunks(h * w).map(|p| p.iter().sum()).collect();
    Tensor::new(vec![c], sums)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Element-wise nonlinearity. Derivatives are computed from the activated
/// output, which every variant here permits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => libm::tanh(x),
        }
    }

    /// d(activation)/d(input), expressed through the activation output `y`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if y > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub fn apply(self, x: &mut Tensor) {
        if self == Activation::Identity {
            return;
        }
        for v in x.data_mut() {
            *v = self.apply_scalar(*v);
        }
    }

    /// Multiplies `grad` in place by the local derivative at `output`.
    pub fn backward(self, output: &Tensor, grad: &mut Tensor) {
        if self == Activation::Identity {
            return;
        }
        for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
            *g *= self.derivative_from_output(y);
        }
    }
}

/// Two-class softmax of one logit pair, returned as `(p0, p1)`.
#[inline]
pub fn softmax2(l0: f64, l1: f64) -> (f64, f64) {
    let m = l0.max(l1);
    let e0 = libm::exp(l0 - m);
    let e1 = libm::exp(l1 - m);
    let s = e0 + e1;
    (e0 / s, e1 / s)
}

/// Batch-mean softmax cross-entropy over `[B, 2]` logits with labels in
/// `{0, 1}`. Returns the loss and its gradient with respect to the logits.
pub fn softmax_xent(logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
    let b = match *logits.shape() {
        [b, 2] => b,
        _ => return Err(dim("softmax_xent", format!("logits must be [B, 2], got {:?}", logits.shape()))),
    };
    if b == 0 {
        return Err(Error::Argument("softmax_xent: empty batch".into()));
    }
    if labels.len() != b {
        return Err(dim("softmax_xent", format!("{} logit rows vs {} labels", b, labels.len())));
    }
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(2 * b);
    for (row, &label) in logits.data().chunks(2).zip(labels) {
        if label > 1 {
            return Err(Error::Argument(format!("softmax_xent: label {} is not 0 or 1", label)));
        }
        let m = row[0].max(row[1]);
        let lse = m + libm::log(libm::exp(row[0] - m) + libm::exp(row[1] - m));
        loss += lse - row[label as usize];
        let (p0, p1) = softmax2(row[0], row[1]);
        grad.push((p0 - if label == 0 { 1.0 } else { 0.0 }) * inv_b);
        grad.push((p1 - if label == 1 { 1.0 } else { 0.0 }) * inv_b);
    }
    let loss = loss * inv_b;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_xent loss".into()));
    }
    Ok((loss, Tensor::new(vec![b, 2], grad)?))
}
