//! C ABI over `hypervision`.
//!
//! Every function returns an [`HvStatus`]; on failure the message is
//! available from [`hv_last_error_message`] on the same thread. Models are
//! opaque `HvModel*` handles owned by the caller and released with
//! [`hv_model_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use hypervision::checkpoint;
use hypervision::data::{self, GrayImage, PhantomSpec};
use hypervision::losses::DiceCounts;
use hypervision::network::{Model, ModelConfig};
use hypervision::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Checksum = 6,
    Numeric = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct HvModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> HvStatus {
    match e {
        Error::Shape { .. } => HvStatus::Shape,
        Error::Io { .. } => HvStatus::Io,
        Error::Format { .. } => HvStatus::Format,
        Error::Checksum { .. } => HvStatus::Checksum,
        Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => HvStatus::Numeric,
        _ => HvStatus::InvalidArgument,
    }
}

struct Fail(HvStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(HvStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(HvStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HvStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
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
            HvStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const HvModel) -> Result<&'a HvModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn checked_len(dims: &[usize]) -> Result<usize, Fail> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| invalid("extent product overflows"))
}

/// Message of the last failed call on this thread; empty after success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn hv_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn hv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Freshly initialised model with default hyper-parameters apart from the
/// base width, attention switch and init seed.
///
/// # Safety
/// `out` must be a valid pointer to write a handle into.
#[no_mangle]
pub unsafe extern "C" fn hv_model_new(base_channels: usize, use_attention: bool, init_seed: u64, out: *mut *mut HvModel) -> HvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ModelConfig { base_channels, use_attention, init_seed, ..Default::default() };
        let model = Model::new(cfg)?;
        put(out, Box::into_raw(Box::new(HvModel { model })), "out")
    })
}

/// Loads a checkpoint (CRC verified).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hv_model_load(path: *const c_char, out: *mut *mut HvModel) -> HvStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (model, _) = checkpoint::load(path)?;
        put(out, Box::into_raw(Box::new(HvModel { model })), "out")
    })
}

/// Writes weights and running statistics without optimizer state.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hv_model_save(model: *const HvModel, path: *const c_char) -> HvStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = path_arg(path)?;
        Ok(checkpoint::save(path, &m.model, None)?)
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hv_model_free(model: *mut HvModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// # Safety
/// `model` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hv_model_parameter_count(model: *const HvModel, out: *mut usize) -> HvStatus {
    guard(|| {
        let m = model_ref(model)?;
        put(out, m.model.parameter_count(), "out")
    })
}

/// Inference on `[batch,1,height,width]` normalised input; writes the final
/// head's `[batch,3,height,width]` probabilities. `out_len` must equal
/// `batch*3*height*width`.
///
/// # Safety
/// `input` must hold `batch*height*width` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn hv_model_forward(
    model: *const HvModel,
    input: *const f64,
    batch: usize,
    height: usize,
    width: usize,
    out: *mut f64,
    out_len: usize,
) -> HvStatus {
    guard(|| {
        let m = model_ref(model)?;
        let n = checked_len(&[batch, height, width])?;
        let classes = m.model.config().num_classes;
        if out_len != checked_len(&[n, classes])? {
            return Err(Fail(HvStatus::Shape, format!("out_len {out_len}, expected {}", n * classes)));
        }
        let x = Tensor::new(&[batch, 1, height, width], slice(input, n, "input")?.to_vec())?;
        let probs = m.model.infer(&x)?;
        slice_mut(out, out_len, "out")?.copy_from_slice(probs.data());
        Ok(())
    })
}

/// Segments a raw 8-bit grayscale image at `size × size`; writes `size*size`
/// labels (0 background, 1 kidney, 2 tumor) into `out_labels`.
///
/// # Safety
/// `pixels` must hold `width*height` bytes, `out_labels` `out_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn hv_model_predict(
    model: *const HvModel,
    pixels: *const u8,
    width: usize,
    height: usize,
    size: usize,
    out_labels: *mut u8,
    out_len: usize,
) -> HvStatus {
    guard(|| {
        let m = model_ref(model)?;
        let image = GrayImage::new(width, height, slice(pixels, checked_len(&[width, height])?, "pixels")?.to_vec())?;
        if out_len != checked_len(&[size, size])? {
            return Err(Fail(HvStatus::Shape, format!("out_len {out_len}, expected {}", size * size)));
        }
        let (mask, _) = hypervision::trainer::predict(&m.model, &image, size)?;
        slice_mut(out_labels, out_len, "out_labels")?.copy_from_slice(&mask.labels);
        Ok(())
    })
}

/// Deterministic raw phantom `index` of the default generator at `size`
/// with `seed`. Both outputs hold `size*size` bytes.
///
/// # Safety
/// `out_pixels` and `out_labels` must hold `len` bytes each.
#[no_mangle]
pub unsafe extern "C" fn hv_generate_phantom(
    size: usize,
    seed: u64,
    index: usize,
    out_pixels: *mut u8,
    out_labels: *mut u8,
    len: usize,
) -> HvStatus {
    guard(|| {
        if len != checked_len(&[size, size])? {
            return Err(Fail(HvStatus::Shape, format!("len {len}, expected {}", size * size)));
        }
        let raw = data::generate_phantom_raw(&PhantomSpec { size, seed, ..Default::default() }, index)?;
        slice_mut(out_pixels, len, "out_pixels")?.copy_from_slice(&raw.image.pixels);
        slice_mut(out_labels, len, "out_labels")?.copy_from_slice(&raw.mask.labels);
        Ok(())
    })
}

/// Hard Dice of `class` between two label maps of `len` entries; 1 when the
/// class is absent from both.
///
/// # Safety
/// `pred` and `truth` must hold `len` bytes each.
#[no_mangle]
pub unsafe extern "C" fn hv_dice_score(pred: *const u8, truth: *const u8, len: usize, class_id: u8, out: *mut f64) -> HvStatus {
    guard(|| {
        if class_id as usize >= data::NUM_CLASSES {
            return Err(invalid(format!("class {class_id} out of range")));
        }
        let (p, t) = (slice(pred, len, "pred")?, slice(truth, len, "truth")?);
        put(out, DiceCounts::from_labels(p, t, class_id).score(), "out")
    })
}
