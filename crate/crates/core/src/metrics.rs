//! Image-quality metrics following the usual super-resolution benchmark
//! protocol, and the bicubic resampler used for degradation and baselines.
//!
//! Images are `3×H×W` tensors with values in `[0, 1]`.

use crate::error::{contract, dim_err, Result};
use crate::tensor::Tensor;

/// Returned by [`psnr`] when the two images are identical.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalProtocol {
    /// Score the BT.601 luminance channel only.
    pub convert_to_y: bool,
    /// Pixels removed from every side before scoring.
    pub crop_border: usize,
    /// Peak value of the scaled images.
    pub data_range: f64,
}

impl EvalProtocol {
    /// Y channel, border crop equal to the scale factor, 8-bit range.
    pub fn for_scale(scale: usize) -> Self {
        Self {
            convert_to_y: true,
            crop_border: scale,
            data_range: 255.0,
        }
    }

    /// All channels, no crop.
    pub fn rgb() -> Self {
        Self {
            convert_to_y: false,
            crop_border: 0,
            data_range: 255.0,
        }
    }
}

/// BT.601 luminance in `[16, 235]` from RGB in `[0, 1]`.
pub fn rgb_to_y(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(contract(format!("expected RGB, got {c} channels")));
    }
    let n = h * w;
    let d = img.data();
    let y = (0..n)
        .map(|i| 16.0 + 65.481 * d[i] + 128.553 * d[n + i] + 24.966 * d[2 * n + i])
        .collect();
    Tensor::new(vec![1, h, w], y)
}

/// Applies the protocol: optional Y conversion, scaling to `data_range`,
/// border crop. Returns `(channels, h, w, values)`.
fn prepare(img: &Tensor, proto: &EvalProtocol) -> Result<(usize, usize, usize, Vec<f64>)> {
    let (c0, h0, w0) = img.dims3()?;
    let (src, c) = if proto.convert_to_y {
        // Y is already in 8-bit units
        let y = rgb_to_y(img)?;
        let k = proto.data_range / 255.0;
        (y.data().iter().map(|v| v * k).collect::<Vec<_>>(), 1)
    } else {
        (img.data().iter().map(|v| v * proto.data_range).collect(), c0)
    };
    let b = proto.crop_border;
    if 2 * b >= h0 || 2 * b >= w0 {
        return Err(contract(format!("border {b} leaves nothing of a {h0}×{w0} image")));
    }
    let (h, w) = (h0 - 2 * b, w0 - 2 * b);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let row = ch * h0 * w0 + (y + b) * w0 + b;
            out.extend_from_slice(&src[row..row + w]);
        }
    }
    Ok((c, h, w, out))
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor, proto: &EvalProtocol) -> Result<f64> {
    same_shape(a, b, "psnr")?;
    let (_, _, _, x) = prepare(a, proto)?;
    let (_, _, _, y) = prepare(b, proto)?;
    let mse = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (proto.data_range * proto.data_range / mse).log10()).min(PSNR_CAP))
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut g = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable 'valid' filtering of one `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WIN]) -> Vec<f64> {
    let ow = w - SSIM_WIN + 1;
    let oh = h - SSIM_WIN + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            let src = &x[y * w + x0..y * w + x0 + SSIM_WIN];
            rows[y * ow + x0] = src.iter().zip(g).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            let mut s = 0.0;
            for (k, gk) in g.iter().enumerate() {
                s += rows[(y0 + k) * ow + x0] * gk;
            }
            out[y0 * ow + x0] = s;
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// averaged over channels when not scoring luminance only.
pub fn ssim(a: &Tensor, b: &Tensor, proto: &EvalProtocol) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let (c, h, w, x) = prepare(a, proto)?;
    let (_, _, _, y) = prepare(b, proto)?;
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(contract(format!("ssim needs at least 11×11 pixels, got {h}×{w}")));
    }
    let c1 = (0.01 * proto.data_range).powi(2);
    let c2 = (0.03 * proto.data_range).powi(2);
    let g = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let xa = &x[ch * plane..(ch + 1) * plane];
        let ya = &y[ch * plane..(ch + 1) * plane];
        let xx: Vec<f64> = xa.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = ya.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xa.iter().zip(ya).map(|(p, q)| p * q).collect();
        let mu_x = filter_valid(xa, h, w, &g);
        let mu_y = filter_valid(ya, h, w, &g);
        let sxx = filter_valid(&xx, h, w, &g);
        let syy = filter_valid(&yy, h, w, &g);
        let sxy = filter_valid(&xy, h, w, &g);
        let mut acc = 0.0;
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = sxx[i] - mx * mx;
            let vy = syy[i] - my * my;
            let cov = sxy[i] - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        total += acc / mu_x.len() as f64;
    }
    Ok(total / c as f64)
}

/// Resampling direction and integer factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    Up(usize),
    Down(usize),
}

/// Cubic convolution kernel with `a = −0.5`.
pub fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Per-output-sample `(first source index, weights)` along one axis.
///
/// Pixel centers are aligned (`u = (i + 0.5)/ratio − 0.5`). When shrinking,
/// the kernel is stretched by `1/ratio` to antialias. Out-of-range taps are
/// clamped to the edge; weights are normalized to sum to one.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = n_out as f64 / n_in as f64;
    let stretch = if ratio < 1.0 { ratio } else { 1.0 };
    let half = 2.0 / stretch;
    (0..n_out)
        .map(|i| {
            let u = (i as f64 + 0.5) / ratio - 0.5;
            let lo = (u - half).floor() as i64;
            let hi = (u + half).ceil() as i64;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .filter_map(|j| {
                    let wt = stretch * cubic(stretch * (u - j as f64));
                    (wt != 0.0).then(|| (j.clamp(0, n_in as i64 - 1) as usize, wt))
                })
                .collect();
            let s: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= s);
            taps
        })
        .collect()
}

/// Separable bicubic resampling of a `C×H×W` image, rows first.
pub fn bicubic_resize(img: &Tensor, resize: Resize) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    let (oh, ow) = match resize {
        Resize::Up(s) if (2..=4).contains(&s) => (h * s, w * s),
        Resize::Down(s) if (2..=4).contains(&s) => {
            if h % s != 0 || w % s != 0 {
                return Err(contract(format!("{h}×{w} is not divisible by {s}")));
            }
            (h / s, w / s)
        }
        other => return Err(contract(format!("unsupported resize {other:?}"))),
    };
    resize_to(img, oh, ow).inspect(|t| {
        debug_assert_eq!(t.shape(), &[c, oh, ow]);
    })
}

/// Bicubic resampling to an arbitrary `oh×ow`.
pub fn resize_to(img: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    if oh == 0 || ow == 0 || h == 0 || w == 0 {
        return Err(contract("resize to or from an empty image"));
    }
    let wy = axis_weights(h, oh);
    let wx = axis_weights(w, ow);
    let src = img.data();
    let mut mid = vec![0.0; c * oh * w];
    for ch in 0..c {
        for (y, taps) in wy.iter().enumerate() {
            let dst = &mut mid[(ch * oh + y) * w..(ch * oh + y + 1) * w];
            for &(j, wt) in taps {
                let row = &src[(ch * h + j) * w..(ch * h + j + 1) * w];
                for (d, s) in dst.iter_mut().zip(row) {
                    *d += wt * s;
                }
            }
        }
    }
    let mut out = vec![0.0; c * oh * ow];
    for r in 0..c * oh {
        let row = &mid[r * w..(r + 1) * w];
        for (x, taps) in wx.iter().enumerate() {
            out[r * ow + x] = taps.iter().map(|&(j, wt)| wt * row[j]).sum();
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Rounds to the nearest 8-bit level, as when saving a PNG.
pub fn quantize_u8(img: &Tensor) -> Tensor {
    let mut out = img.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    out
}

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

impl EvalRecord {
    pub const CSV_HEADER: &'static str = "image,psnr,ssim,baseline_psnr,baseline_ssim";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.image, self.psnr, self.ssim, self.baseline_psnr, self.baseline_ssim
        )
    }
}

/// Scores a super-resolved image and the bicubic baseline against `hr`.
///
/// `lr` must be the degraded version of `hr` the model was given. SSIM is
/// reported as NaN when the cropped image is smaller than the window.
pub fn evaluate_pair(name: &str, hr: &Tensor, lr: &Tensor, sr: &Tensor, scale: usize) -> Result<EvalRecord> {
    let proto = EvalProtocol::for_scale(scale);
    let base = quantize_u8(&bicubic_resize(lr, Resize::Up(scale))?);
    let sr = quantize_u8(sr);
    let score_ssim = |x: &Tensor| match ssim(x, hr, &proto) {
        Ok(v) => Ok(v),
        Err(crate::AtdError::Contract(_)) => Ok(f64::NAN),
        Err(e) => Err(e),
    };
    Ok(EvalRecord {
        image: name.to_string(),
        psnr: psnr(&sr, hr, &proto)?,
        ssim: score_ssim(&sr)?,
        baseline_psnr: psnr(&base, hr, &proto)?,
        baseline_ssim: score_ssim(&base)?,
    })
}
