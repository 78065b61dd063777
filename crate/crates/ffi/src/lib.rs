//! C interface to the stylemoe core.
//!
//! Models are opaque handles created by the `*_load` functions and released
//! with the matching `*_free`. Every fallible call returns a
//! [`StylemoeStatus`]; the message of the most recent failure on the calling
//! thread is available from [`stylemoe_last_error`]. Images are tightly packed
//! 8-bit RGB, row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use stylemoe::checkpoint::{load_dit, load_encoder, Checkpoint};
use stylemoe::commands::stylize_image;
use stylemoe::dit::StyleDit;
use stylemoe::encoder::StyleEncoder;
use stylemoe::moe::route_logits;
use stylemoe::raster::Raster;
use stylemoe::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StylemoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Version = 5,
    Shape = 6,
    NonFinite = 7,
    BufferTooSmall = 8,
    Panic = 9,
    Other = 10,
}

/// A trained style encoder.
pub struct StylemoeEncoder {
    encoder: StyleEncoder,
}

/// A stylizer: diffusion model with MoE sites plus its frozen encoder.
pub struct StylemoeStylizer {
    model: StyleDit,
    encoder: StyleEncoder,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> StylemoeStatus {
    match e {
        Error::Io(_) | Error::DanglingPath(_) => StylemoeStatus::Io,
        Error::Format(_) | Error::Json(_) | Error::Image(_) => StylemoeStatus::Format,
        Error::Version { .. } => StylemoeStatus::Version,
        Error::Shape { .. } => StylemoeStatus::Shape,
        Error::NonFinite(_) => StylemoeStatus::NonFinite,
        Error::InvalidArgument(_) | Error::UnsupportedImage(_) | Error::Config(_) => StylemoeStatus::InvalidArgument,
        _ => StylemoeStatus::Other,
    }
}

struct Fail(StylemoeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail<T>(status: StylemoeStatus, msg: &str) -> Result<T, Fail> {
    Err(Fail(status, msg.to_string()))
}

/// Runs `f`, recording the error message and converting panics.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> StylemoeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StylemoeStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            StylemoeStatus::Panic
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Fail> {
    if path.is_null() {
        return fail(StylemoeStatus::NullPointer, "path is null");
    }
    match unsafe { CStr::from_ptr(path) }.to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(StylemoeStatus::InvalidArgument, "path is not UTF-8"),
    }
}

unsafe fn image_arg(rgb: *const u8, width: usize, height: usize) -> Result<Raster, Fail> {
    if rgb.is_null() {
        return fail(StylemoeStatus::NullPointer, "image buffer is null");
    }
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Fail(StylemoeStatus::InvalidArgument, "image dimensions overflow".into()))?;
    let bytes = unsafe { std::slice::from_raw_parts(rgb, len) };
    Ok(Raster::new(width, height, bytes.to_vec())?)
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn stylemoe_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Loads the encoder of an encoder or stylizer checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stylemoe_encoder_load(path: *const c_char, out: *mut *mut StylemoeEncoder) -> StylemoeStatus {
    guard(|| {
        if out.is_null() {
            return fail(StylemoeStatus::NullPointer, "out is null");
        }
        let path = unsafe { path_arg(path)? };
        let encoder = load_encoder(&Checkpoint::load(&path)?)?;
        unsafe { *out = Box::into_raw(Box::new(StylemoeEncoder { encoder })) };
        Ok(())
    })
}

/// # Safety
/// `handle` must be null or come from [`stylemoe_encoder_load`], and is
/// invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn stylemoe_encoder_free(handle: *mut StylemoeEncoder) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Embedding width, or 0 for a null handle.
///
/// # Safety
/// `handle` must be null or a live encoder handle.
#[no_mangle]
pub unsafe extern "C" fn stylemoe_encoder_embedding_dim(handle: *const StylemoeEncoder) -> usize {
    unsafe { handle.as_ref() }.map_or(0, |h| h.encoder.config().embedding_dim)
}

/// Square image side the encoder expects, or 0 for a null handle.
///
/// # Safety
/// `handle` must be null or a live encoder handle.
#[no_mangle]
pub unsafe extern "C" fn stylemoe_encoder_image_size(handle: *const StylemoeEncoder) -> usize {
    unsafe { handle.as_ref() }.map_or(0, |h| h.encoder.config().extractor.size)
}

/// Writes the style embedding of an RGB image into `out` (`out_len` values).
///
/// # Safety
/// `rgb` must hold `width * height * 3` bytes and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn stylemoe_encoder_embed(
    handle: *const StylemoeEncoder,
    rgb: *const u8,
    width: usize,
    height: usize,
    out: *mut f64,
    out_len: usize,
) -> StylemoeStatus {
    guard(|| {
        let Some(h) = (unsafe { handle.as_ref() }) else {
            return fail(StylemoeStatus::NullPointer, "encoder handle is null");
        };
        if out.is_null() {
            return fail(StylemoeStatus::NullPointer, "out is null");
        }
        let img = unsafe { image_arg(rgb, width, height)? };
        let e = h.encoder.embed_image(&img)?;
        if out_len < e.0.len() {
            return fail(StylemoeStatus::BufferTooSmall, &format!("embedding needs {} values", e.0.len()));
        }
        unsafe { ptr::copy_nonoverlapping(e.0.as_ptr(), out, e.0.len()) };
        Ok(())
    })
}

/// Loads a stylizer checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stylemoe_stylizer_load(path: *const c_char, out: *mut *mut StylemoeStylizer) -> StylemoeStatus {
    guard(|| {
        if out.is_null() {
            return fail(StylemoeStatus::NullPointer, "out is null");
        }
        let path = unsafe { path_arg(path)? };
        let ckpt = Checkpoint::load(&path)?;
        let model = load_dit(&ckpt)?;
        if model.moe().is_none() {
            return fail(StylemoeStatus::Format, "checkpoint holds no MoE sites");
        }
        let encoder = load_encoder(&ckpt)?;
        unsafe { *out = Box::into_raw(Box::new(StylemoeStylizer { model, encoder })) };
        Ok(())
    })
}

/// # Safety
/// `handle` must be null or come from [`stylemoe_stylizer_load`], and is
/// invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn stylemoe_stylizer_free(handle: *mut StylemoeStylizer) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Square image side of the model, or 0 for a null handle.
///
/// # Safety
/// `handle` must be null or a live stylizer handle.
#[no_mangle]
pub unsafe extern "C" fn stylemoe_stylizer_image_size(handle: *const StylemoeStylizer) -> usize {
    unsafe { handle.as_ref() }.map_or(0, |h| h.model.config().image_size)
}

/// Samples a stylization of `content` in the style of `style`. Both inputs
/// and `out` are `size * size * 3` bytes.
///
/// # Safety
/// `content`, `style` and `out` must each hold `size * size * 3` bytes.
#[no_mangle]
pub unsafe extern "C" fn stylemoe_stylize(
    handle: *const StylemoeStylizer,
    content: *const u8,
    style: *const u8,
    size: usize,
    category: usize,
    steps: usize,
    seed: u64,
    out: *mut u8,
) -> StylemoeStatus {
    guard(|| {
        let Some(h) = (unsafe { handle.as_ref() }) else {
            return fail(StylemoeStatus::NullPointer, "stylizer handle is null");
        };
        if out.is_null() {
            return fail(StylemoeStatus::NullPointer, "out is null");
        }
        let content = unsafe { image_arg(content, size, size)? };
        let style = unsafe { image_arg(style, size, size)? };
        let img = stylize_image(&h.model, &h.encoder, &content, &style, category, steps, seed)?;
        unsafe { ptr::copy_nonoverlapping(img.bytes().as_ptr(), out, img.bytes().len()) };
        Ok(())
    })
}

/// Top-k routing of `n` logits: writes k expert indices (ties to the lower
/// index) and their softmax weights.
///
/// # Safety
/// `logits` must hold `n` doubles, `indices` and `weights` `k` entries each.
#[no_mangle]
pub unsafe extern "C" fn stylemoe_route_logits(
    logits: *const f64,
    n: usize,
    k: usize,
    indices: *mut usize,
    weights: *mut f64,
) -> StylemoeStatus {
    guard(|| {
        if logits.is_null() || indices.is_null() || weights.is_null() {
            return fail(StylemoeStatus::NullPointer, "null buffer");
        }
        let l = unsafe { std::slice::from_raw_parts(logits, n) };
        let d = route_logits(l, k)?;
        unsafe {
            ptr::copy_nonoverlapping(d.indices.as_ptr(), indices, k);
            ptr::copy_nonoverlapping(d.weights.as_ptr(), weights, k);
        }
        Ok(())
    })
}
