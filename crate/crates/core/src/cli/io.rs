use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, RgbImage};

use crate::error::{AtdError, Result};
use crate::tensor::Tensor;

/// Reads any 8-bit PNG as a `3×H×W` tensor in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| AtdError::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    Ok(rgb8_to_tensor(img.width() as usize, img.height() as usize, img.as_raw()))
}

/// Interleaved RGB bytes → planar tensor.
pub fn rgb8_to_tensor(w: usize, h: usize, bytes: &[u8]) -> Tensor {
    let n = w * h;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in bytes.chunks_exact(3).take(n).enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("3·h·w values")
}

/// Planar tensor → interleaved RGB bytes, rounded and clamped.
pub fn tensor_to_rgb8(img: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(AtdError::Image(format!("expected 3 channels, got {c}")));
    }
    let n = h * w;
    let d = img.data();
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        for ch in 0..3 {
            out.push(to_u8(d[ch * n + i]));
        }
    }
    Ok((w, h, out))
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    let (w, h, bytes) = tensor_to_rgb8(img)?;
    let buf = RgbImage::from_raw(w as u32, h as u32, bytes).expect("sized buffer");
    buf.save(path)
        .map_err(|e| AtdError::Image(format!("{}: {e}", path.display())))
}

/// Writes a binary mask as a black/white grayscale PNG.
pub fn save_mask(path: &Path, mask: &[bool], h: usize, w: usize) -> Result<()> {
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[y as usize * w + x as usize] { 255 } else { 0 }])
    });
    img.save(path)
        .map_err(|e| AtdError::Image(format!("{}: {e}", path.display())))
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Named images that loaded, and the paths that failed with their errors.
pub type LoadedDir = (Vec<(String, Tensor)>, Vec<(PathBuf, AtdError)>);

/// Loads every PNG in `dir`; unreadable files are returned separately.
pub fn load_dir(dir: &Path) -> Result<LoadedDir> {
    let mut good = Vec::new();
    let mut bad = Vec::new();
    for p in list_pngs(dir)? {
        match load_png(&p) {
            Ok(t) => good.push((
                p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                t,
            )),
            Err(e) => bad.push((p, e)),
        }
    }
    Ok((good, bad))
}
