//! Forward evaluation of the differentiable primitives on plain tensors.
//!
//! The tape in [`super::Tape`] records these same computations and adds their
//! adjoints; the functions here are usable on their own for inference and tests.

use super::kernels;
use super::Tensor;
use crate::error::{contract, dim_err, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2()?;
    let (k2, m) = b.dims2()?;
    if k != k2 {
        return Err(dim_err("matmul", a.shape(), b.shape()));
    }
    let mut c = vec![0.0; n * m];
    kernels::gemm_nn(a.data(), b.data(), &mut c, n, k, m);
    Ok(Tensor::from_parts(vec![n, m], c))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (n, m) = a.dims2()?;
    Ok(Tensor::from_parts(vec![m, n], kernels::transpose(a.data(), n, m)))
}

/// Softmax over the last axis, with max subtraction.
pub fn softmax(x: &Tensor) -> Tensor {
    let cols = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    kernels::softmax_rows(&mut out, cols, None);
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Per-row standardization: returns `(x̂, 1/σ)` where σ = sqrt(var + eps).
pub(crate) fn standardize(x: &[f64], cols: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        rstd[r] = inv;
        for (o, v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    (xhat, rstd)
}

/// Layer normalization over the last axis with per-column affine.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(contract("layer_norm eps must be positive"));
    }
    let cols = *x.shape().last().unwrap();
    if gamma.numel() != cols || beta.numel() != cols {
        return Err(dim_err("layer_norm", x.shape(), gamma.shape()));
    }
    let (mut y, _) = standardize(x.data(), cols, eps);
    for row in y.chunks_mut(cols) {
        for ((v, g), b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * g + b;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

/// Row norms clamped from below by `eps`.
pub(crate) fn clamped_norms(x: &[f64], cols: usize, eps: f64) -> Vec<f64> {
    x.chunks(cols)
        .map(|r| kernels::dot(r, r).sqrt().max(eps))
        .collect()
}

/// Cosine similarity between every row of `q` and every row of `k`.
pub fn cosine_sim(q: &Tensor, k: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(cosine_sim_cached(q, k, eps)?.0)
}

pub(crate) fn cosine_sim_cached(
    q: &Tensor,
    k: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, c) = q.dims2()?;
    let (m, c2) = k.dims2()?;
    if c != c2 {
        return Err(dim_err("cosine_sim", q.shape(), k.shape()));
    }
    if eps <= 0.0 {
        return Err(contract("cosine_sim eps must be positive"));
    }
    let qn = clamped_norms(q.data(), c, eps);
    let kn = clamped_norms(k.data(), c, eps);
    let mut s = vec![0.0; n * m];
    kernels::gemm_nt(q.data(), k.data(), &mut s, n, c, m);
    for i in 0..n {
        for j in 0..m {
            s[i * m + j] /= qn[i] * kn[j];
        }
    }
    Ok((Tensor::from_parts(vec![n, m], s), qn, kn))
}

fn check_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (c, h, wd) = x.dims3()?;
    match w.shape() {
        [o, ci, 3, 3] if *ci == c => {
            if b.numel() != *o {
                return Err(dim_err("conv2d bias", w.shape(), b.shape()));
            }
            Ok((c, h, wd, *o))
        }
        [_, _, 3, 3] => Err(dim_err("conv2d", x.shape(), w.shape())),
        _ => Err(contract(format!("conv2d expects a 3×3 kernel, got {:?}", w.shape()))),
    }
}

/// 3×3 cross-correlation, zero padding 1, stride 1. Returns the output and
/// the unfolded input columns (kept by the tape for the weight gradient).
pub(crate) fn conv2d_cached(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (c, h, wd, o) = check_conv(x, w, b)?;
    let hw = h * wd;
    let cols = kernels::im2col3(x.data(), c, h, wd);
    let mut y = vec![0.0; o * hw];
    for (oc, plane) in y.chunks_mut(hw).enumerate() {
        plane.fill(b.data()[oc]);
    }
    kernels::gemm_nn(w.data(), &cols, &mut y, o, c * 9, hw);
    Ok((Tensor::from_parts(vec![o, h, wd], y), cols))
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(conv2d_cached(x, w, b)?.0)
}

/// Rearranges `(s²·C)×H×W` into `C×(sH)×(sW)`:
/// `out[c, y·s+dy, x·s+dx] = in[c·s² + dy·s + dx, y, x]`.
pub fn pixel_shuffle(x: &Tensor, s: usize) -> Result<Tensor> {
    let (cin, h, w) = x.dims3()?;
    if s == 0 || cin % (s * s) != 0 {
        return Err(dim_err("pixel_shuffle", x.shape(), &[s]));
    }
    let c = cin / (s * s);
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![0.0; cin * h * w];
    let src = x.data();
    for ch in 0..c {
        for dy in 0..s {
            for dx in 0..s {
                let plane = &src[(ch * s * s + dy * s + dx) * h * w..][..h * w];
                for y in 0..h {
                    for xx in 0..w {
                        out[ch * oh * ow + (y * s + dy) * ow + xx * s + dx] = plane[y * w + xx];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor, s: usize) -> Result<Tensor> {
    let (c, oh, ow) = x.dims3()?;
    if s == 0 || oh % s != 0 || ow % s != 0 {
        return Err(dim_err("pixel_unshuffle", x.shape(), &[s]));
    }
    let (h, w) = (oh / s, ow / s);
    let mut out = vec![0.0; c * oh * ow];
    let src = x.data();
    for ch in 0..c {
        for dy in 0..s {
            for dx in 0..s {
                let plane = &mut out[(ch * s * s + dy * s + dx) * h * w..][..h * w];
                for y in 0..h {
                    for xx in 0..w {
                        plane[y * w + xx] = src[ch * oh * ow + (y * s + dy) * ow + xx * s + dx];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c * s * s, h, w], out))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_K * (v + 0.044715 * v * v * v)).tanh())
}

pub(crate) fn gelu_grad(v: f64) -> f64 {
    let u = GELU_K * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * v * v)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `[N×C]` token matrix → `C×H×W` image.
pub fn tokens_to_image(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c) = x.dims2()?;
    if n != h * w {
        return Err(dim_err("tokens_to_image", x.shape(), &[h, w]));
    }
    Ok(Tensor::from_parts(vec![c, h, w], kernels::transpose(x.data(), n, c)))
}

/// `C×H×W` image → `[N×C]` token matrix.
pub fn image_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    Ok(Tensor::from_parts(vec![h * w, c], kernels::transpose(x.data(), c, h * w)))
}
