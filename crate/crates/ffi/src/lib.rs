//! C ABI over the `atd-sr` engine.
//!
//! Models are opaque [`AtdModel`] handles created by `atd_model_new` or
//! `atd_model_load` and released with `atd_model_free`. Every fallible call
//! returns an [`AtdStatus`]; on failure a message is available from
//! `atd_last_error` on the same thread until the next failing call.
//! Panics never cross the boundary; they surface as `ATD_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use atd_sr::cli::io::{rgb8_to_tensor, tensor_to_rgb8};
use atd_sr::cli::Checkpoint;
use atd_sr::metrics::{psnr, ssim, EvalProtocol};
use atd_sr::{preset, AtdError};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AtdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Dimension = 6,
    NonFinite = 7,
    Data = 8,
    Panic = 9,
}

/// Opaque model handle.
pub struct AtdModel {
    inner: atd_sr::AtdModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &AtdError) -> AtdStatus {
    match e {
        AtdError::Config(_) => AtdStatus::Config,
        AtdError::Io(_) | AtdError::Image(_) => AtdStatus::Io,
        AtdError::Format(_) => AtdStatus::Format,
        AtdError::Dimension { .. } | AtdError::Contract(_) => AtdStatus::Dimension,
        AtdError::NonFinite(_) => AtdStatus::NonFinite,
        AtdError::Data(_) => AtdStatus::Data,
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (AtdStatus, String)>) -> AtdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AtdStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            AtdStatus::Panic
        }
    }
}

fn lib_err(e: AtdError) -> (AtdStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (AtdStatus, String) {
    (AtdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (AtdStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (AtdStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn atd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Creates an untrained model from a named preset.
///
/// # Safety
/// `preset_name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn atd_model_new(
    preset_name: *const c_char,
    scale: u32,
    seed: u64,
    out: *mut *mut AtdModel,
) -> AtdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let name = str_arg(preset_name, "preset_name")?;
        let cfg = preset(name, scale as usize).map_err(lib_err)?;
        let inner = atd_sr::AtdModel::new(cfg, seed).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(AtdModel { inner }));
        Ok(())
    })
}

/// Loads a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn atd_model_load(path: *const c_char, out: *mut *mut AtdModel) -> AtdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = PathBuf::from(str_arg(path, "path")?);
        let inner = Checkpoint::load(&path)
            .and_then(|c| c.to_model())
            .map_err(lib_err)?;
        *out = Box::into_raw(Box::new(AtdModel { inner }));
        Ok(())
    })
}

/// Writes the model's parameters to a checkpoint file.
///
/// # Safety
/// `model` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn atd_model_save(model: *const AtdModel, path: *const c_char) -> AtdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = PathBuf::from(str_arg(path, "path")?);
        Checkpoint::from_model(&m.inner).save(&path).map_err(lib_err)
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn atd_model_free(model: *mut AtdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of learnable scalars.
///
/// # Safety
/// `model` must come from this library and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn atd_model_param_count(model: *const AtdModel, out: *mut u64) -> AtdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.inner.count_params() as u64;
        Ok(())
    })
}

/// Upscaling factor of the model.
///
/// # Safety
/// `model` must come from this library and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn atd_model_scale(model: *const AtdModel, out: *mut u32) -> AtdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.inner.config.scale as u32;
        Ok(())
    })
}

/// Upscales interleaved 8-bit RGB. `dst` must hold
/// `3 · (scale·width) · (scale·height)` bytes; `dst_len` is checked.
///
/// # Safety
/// `src` must point to `3·width·height` readable bytes and `dst` to
/// `dst_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn atd_upscale_rgb8(
    model: *const AtdModel,
    src: *const u8,
    width: u32,
    height: u32,
    dst: *mut u8,
    dst_len: usize,
) -> AtdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if src.is_null() || dst.is_null() {
            return Err(null("image buffer"));
        }
        if width == 0 || height == 0 {
            return Err((AtdStatus::InvalidArgument, "image is empty".into()));
        }
        let (w, h) = (width as usize, height as usize);
        let s = m.inner.config.scale;
        let need = 3 * w * h * s * s;
        if dst_len < need {
            return Err((
                AtdStatus::InvalidArgument,
                format!("dst holds {dst_len} bytes, {need} needed"),
            ));
        }
        let input = rgb8_to_tensor(w, h, std::slice::from_raw_parts(src, 3 * w * h));
        let sr = m.inner.infer(&input).map_err(lib_err)?;
        let (_, _, bytes) = tensor_to_rgb8(&sr).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(dst, need).copy_from_slice(&bytes);
        Ok(())
    })
}

unsafe fn image_pair(
    a: *const u8,
    b: *const u8,
    width: u32,
    height: u32,
) -> Result<(atd_sr::Tensor, atd_sr::Tensor), (AtdStatus, String)> {
    if a.is_null() || b.is_null() {
        return Err(null("image buffer"));
    }
    let (w, h) = (width as usize, height as usize);
    let n = 3 * w * h;
    Ok((
        rgb8_to_tensor(w, h, std::slice::from_raw_parts(a, n)),
        rgb8_to_tensor(w, h, std::slice::from_raw_parts(b, n)),
    ))
}

fn protocol(crop_border: u32, y_only: bool) -> EvalProtocol {
    EvalProtocol {
        convert_to_y: y_only,
        crop_border: crop_border as usize,
        data_range: 255.0,
    }
}

/// PSNR in dB of two interleaved RGB images of equal size.
///
/// # Safety
/// `a` and `b` must each point to `3·width·height` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn atd_psnr_rgb8(
    a: *const u8,
    b: *const u8,
    width: u32,
    height: u32,
    crop_border: u32,
    y_only: bool,
    out: *mut f64,
) -> AtdStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let (x, y) = image_pair(a, b, width, height)?;
        *out = psnr(&x, &y, &protocol(crop_border, y_only)).map_err(lib_err)?;
        Ok(())
    })
}

/// Mean SSIM of two interleaved RGB images of equal size.
///
/// # Safety
/// `a` and `b` must each point to `3·width·height` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn atd_ssim_rgb8(
    a: *const u8,
    b: *const u8,
    width: u32,
    height: u32,
    crop_border: u32,
    y_only: bool,
    out: *mut f64,
) -> AtdStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let (x, y) = image_pair(a, b, width, height)?;
        *out = ssim(&x, &y, &protocol(crop_border, y_only)).map_err(lib_err)?;
        Ok(())
    })
}
