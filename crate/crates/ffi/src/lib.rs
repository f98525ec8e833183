//! C interface to `deapsam`.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `deap_*_new`/`_read`/`_load` call and released by the matching `_free`.
//! Every fallible call returns a status: `DEAP_OK`, a negative code for
//! misuse of the interface itself, or the positive code of the library error.
//! `deap_last_error` describes the most recent failure on the calling thread.
//! Panics never unwind into C; they surface as `DEAP_ERR_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use deapsam::checkpoint::{peek_precision, Checkpoint};
use deapsam::config::RunConfig;
use deapsam::cost::{sharing_reduction, CostOptions};
use deapsam::metrics::{dice_score, nsd, THRESHOLD};
use deapsam::train::Trainer;
use deapsam::volume::{generate_phantom, Mask, PhantomSpec, Volume};
use deapsam::{Error, Precision, Scalar};

pub const DEAP_OK: i32 = 0;
pub const DEAP_ERR_NULL: i32 = -1;
pub const DEAP_ERR_UTF8: i32 = -2;
pub const DEAP_ERR_PANIC: i32 = -3;
pub const DEAP_ERR_BUFFER: i32 = -4;

pub const DEAP_ERR_SHAPE: i32 = 2;
pub const DEAP_ERR_AXIS: i32 = 3;
pub const DEAP_ERR_NON_FINITE: i32 = 4;
pub const DEAP_ERR_NON_SCALAR_LOSS: i32 = 5;
pub const DEAP_ERR_NON_DETERMINISTIC: i32 = 6;
pub const DEAP_ERR_BAD_MAGIC: i32 = 7;
pub const DEAP_ERR_HEADER: i32 = 8;
pub const DEAP_ERR_PAYLOAD: i32 = 9;
pub const DEAP_ERR_NON_FINITE_VOXEL: i32 = 10;
pub const DEAP_ERR_INVALID_ARGUMENT: i32 = 11;
pub const DEAP_ERR_CONFIG: i32 = 12;
pub const DEAP_ERR_UNKNOWN_PARAMETER: i32 = 13;
pub const DEAP_ERR_MISSING_PARAMETER: i32 = 14;
pub const DEAP_ERR_NON_FINITE_GRADIENT: i32 = 15;
pub const DEAP_ERR_DIVERGED: i32 = 16;
pub const DEAP_ERR_IO: i32 = 17;

/// Run configuration.
pub struct DeapConfig(RunConfig);

/// Image volume, `f32` voxels, channels last.
pub struct DeapVolume(Volume);

/// Binary mask.
pub struct DeapMask(Mask);

enum Model {
    F32(Trainer<f32>),
    F64(Trainer<f64>),
}

/// A model with its configuration and optimizer state.
pub struct DeapModel(Model);

enum Fail {
    Core(Error),
    Null(&'static str),
    Utf8(&'static str),
    Buffer { need: usize, have: usize },
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> i32 {
    let (code, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (DEAP_OK, String::new()),
        Ok(Err(Fail::Core(e))) => (e.code(), e.to_string()),
        Ok(Err(Fail::Null(what))) => (DEAP_ERR_NULL, format!("{what} is null")),
        Ok(Err(Fail::Utf8(what))) => (DEAP_ERR_UTF8, format!("{what} is not valid UTF-8")),
        Ok(Err(Fail::Buffer { need, have })) => {
            (DEAP_ERR_BUFFER, format!("buffer holds {have} elements, {need} needed"))
        }
        Err(p) => {
            let what = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            (DEAP_ERR_PANIC, format!("internal panic: {what}"))
        }
    };
    set_last_error(msg);
    code
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Utf8(what))
}

unsafe fn obj<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn obj_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn out<T>(p: *mut T, value: T, what: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    p.write(value);
    Ok(())
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn dims3(p: *const usize) -> Result<[usize; 3], Fail> {
    let s = slice(p, 3, "dims")?;
    Ok([s[0], s[1], s[2]])
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn deap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next `deap_*` call on the same thread.
#[no_mangle]
pub extern "C" fn deap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Default configuration.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn deap_config_new(out: *mut *mut DeapConfig) -> i32 {
    guard(|| unsafe { self::out(out, boxed(DeapConfig(RunConfig::default())), "out") })
}

/// Defaults overridden by `key=value` lines, validated.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn deap_config_parse(text: *const c_char, out: *mut *mut DeapConfig) -> i32 {
    guard(|| unsafe {
        let cfg = RunConfig::from_text(str_arg(text, "text")?)?;
        self::out(out, boxed(DeapConfig(cfg)), "out")
    })
}

/// Sets one key. The config is left unchanged on failure.
///
/// # Safety
/// `cfg` must come from this library; `key` and `value` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn deap_config_set(cfg: *mut DeapConfig, key: *const c_char, value: *const c_char) -> i32 {
    guard(|| unsafe {
        let cfg = obj_mut(cfg, "cfg")?;
        let mut next = cfg.0.clone();
        next.set(str_arg(key, "key")?, str_arg(value, "value")?)?;
        next.validate()?;
        cfg.0 = next;
        Ok(())
    })
}

/// Writes the full `key=value` text, NUL-terminated, into `buf`.
/// `out_len` receives the required size including the NUL, also when `buf`
/// is too small (then `DEAP_ERR_BUFFER` is returned). `buf` may be null
/// when `cap` is 0.
///
/// # Safety
/// `buf` must be valid for `cap` bytes; `out_len` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn deap_config_text(
    cfg: *const DeapConfig,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> i32 {
    guard(|| unsafe {
        let text = obj(cfg, "cfg")?.0.to_text();
        let need = text.len() + 1;
        out(out_len, need, "out_len")?;
        if cap < need {
            return Err(Fail::Buffer { need, have: cap });
        }
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
        *buf.add(text.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn deap_config_free(cfg: *mut DeapConfig) {
    free(cfg)
}

/// Volume from `dims[0] * dims[1] * dims[2] * channels` voxels, channels last.
///
/// # Safety
/// `dims` must hold 3 values; `data` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn deap_volume_new(
    dims: *const usize,
    channels: usize,
    data: *const f32,
    len: usize,
    out: *mut *mut DeapVolume,
) -> i32 {
    guard(|| unsafe {
        let v = Volume::new(dims3(dims)?, channels, [1.0; 3], slice(data, len, "data")?.to_vec())?;
        self::out(out, boxed(DeapVolume(v)), "out")
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn deap_volume_read(path: *const c_char, out: *mut *mut DeapVolume) -> i32 {
    guard(|| unsafe {
        let v = Volume::read(str_arg(path, "path")?)?;
        self::out(out, boxed(DeapVolume(v)), "out")
    })
}

/// # Safety
/// `v` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn deap_volume_write(v: *const DeapVolume, path: *const c_char) -> i32 {
    guard(|| unsafe { Ok(obj(v, "volume")?.0.write(str_arg(path, "path")?)?) })
}

/// # Safety
/// `out_dims` must be valid for 3 writes; `out_channels` for one.
#[no_mangle]
pub unsafe extern "C" fn deap_volume_dims(v: *const DeapVolume, out_dims: *mut usize, out_channels: *mut usize) -> i32 {
    guard(|| unsafe {
        let v = &obj(v, "volume")?.0;
        if out_dims.is_null() {
            return Err(Fail::Null("out_dims"));
        }
        ptr::copy_nonoverlapping(v.dims().as_ptr(), out_dims, 3);
        out(out_channels, v.channels(), "out_channels")
    })
}

/// # Safety
/// `v` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn deap_volume_free(v: *mut DeapVolume) {
    free(v)
}

/// Mask from `dims[0] * dims[1] * dims[2]` bytes, each 0 or 1.
///
/// # Safety
/// `dims` must hold 3 values; `data` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn deap_mask_new(dims: *const usize, data: *const u8, len: usize, out: *mut *mut DeapMask) -> i32 {
    guard(|| unsafe {
        let m = Mask::new(dims3(dims)?, slice(data, len, "data")?.to_vec())?;
        self::out(out, boxed(DeapMask(m)), "out")
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn deap_mask_read(path: *const c_char, out: *mut *mut DeapMask) -> i32 {
    guard(|| unsafe {
        let m = Mask::read(str_arg(path, "path")?)?;
        self::out(out, boxed(DeapMask(m)), "out")
    })
}

/// # Safety
/// `m` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn deap_mask_write(m: *const DeapMask, path: *const c_char) -> i32 {
    guard(|| unsafe { Ok(obj(m, "mask")?.0.write(str_arg(path, "path")?)?) })
}

/// Copies the voxels (0 or 1) into `buf`; `out_len` receives the voxel count.
///
/// # Safety
/// `buf` must be valid for `cap` bytes; `out_len` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn deap_mask_data(m: *const DeapMask, buf: *mut u8, cap: usize, out_len: *mut usize) -> i32 {
    guard(|| unsafe {
        let data = obj(m, "mask")?.0.data();
        out(out_len, data.len(), "out_len")?;
        if cap < data.len() {
            return Err(Fail::Buffer { need: data.len(), have: cap });
        }
        if !data.is_empty() {
            if buf.is_null() {
                return Err(Fail::Null("buf"));
            }
            ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        }
        Ok(())
    })
}

/// # Safety
/// `m` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn deap_mask_free(m: *mut DeapMask) {
    free(m)
}

/// Synthetic phantom: image volume and its lesion mask.
///
/// # Safety
/// `dims` must hold 3 values; both outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn deap_phantom(
    seed: u64,
    dims: *const usize,
    lesions: usize,
    noise_sd: f64,
    out_volume: *mut *mut DeapVolume,
    out_mask: *mut *mut DeapMask,
) -> i32 {
    guard(|| unsafe {
        if out_volume.is_null() || out_mask.is_null() {
            return Err(Fail::Null("output"));
        }
        let (v, m) = generate_phantom(&PhantomSpec::new(seed, dims3(dims)?, lesions, noise_sd))?;
        out(out_volume, boxed(DeapVolume(v)), "out_volume")?;
        out(out_mask, boxed(DeapMask(m)), "out_mask")
    })
}

/// Freshly initialized model for `cfg`, in the precision it names.
///
/// # Safety
/// `cfg` must come from this library; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn deap_model_new(cfg: *const DeapConfig, out: *mut *mut DeapModel) -> i32 {
    guard(|| unsafe {
        let cfg = obj(cfg, "cfg")?.0.clone();
        let m = match cfg.train.precision {
            Precision::F32 => Model::F32(Trainer::new(cfg)?),
            Precision::F64 => Model::F64(Trainer::new(cfg)?),
        };
        self::out(out, boxed(DeapModel(m)), "out")
    })
}

/// Model restored from a checkpoint file of either precision.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn deap_model_load(path: *const c_char, out: *mut *mut DeapModel) -> i32 {
    guard(|| unsafe {
        let path = str_arg(path, "path")?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let m = match peek_precision(&bytes)? {
            Precision::F32 => Model::F32(Trainer::from_checkpoint(Checkpoint::decode(&bytes)?)?),
            Precision::F64 => Model::F64(Trainer::from_checkpoint(Checkpoint::decode(&bytes)?)?),
        };
        self::out(out, boxed(DeapModel(m)), "out")
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn deap_model_save(model: *const DeapModel, path: *const c_char) -> i32 {
    guard(|| unsafe {
        let path = str_arg(path, "path")?;
        match &obj(model, "model")?.0 {
            Model::F32(t) => t.checkpoint(0).write(path)?,
            Model::F64(t) => t.checkpoint(0).write(path)?,
        }
        Ok(())
    })
}

fn predict_into<T: Scalar>(t: &Trainer<T>, v: &Volume, buf: &mut [f32]) -> Result<(), Fail> {
    let p = t.predict(v)?;
    for (o, &x) in buf.iter_mut().zip(p.data()) {
        *o = x.to_f32();
    }
    Ok(())
}

/// Foreground probabilities, one per voxel in `H, W, D` order.
/// `out_len` receives the voxel count.
///
/// # Safety
/// `buf` must be valid for `cap` floats; `out_len` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn deap_model_predict(
    model: *const DeapModel,
    volume: *const DeapVolume,
    buf: *mut f32,
    cap: usize,
    out_len: *mut usize,
) -> i32 {
    guard(|| unsafe {
        let (model, v) = (&obj(model, "model")?.0, &obj(volume, "volume")?.0);
        let n = v.dims().iter().product();
        out(out_len, n, "out_len")?;
        if cap < n {
            return Err(Fail::Buffer { need: n, have: cap });
        }
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        let buf = std::slice::from_raw_parts_mut(buf, n);
        match model {
            Model::F32(t) => predict_into(t, v, buf),
            Model::F64(t) => predict_into(t, v, buf),
        }
    })
}

/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn deap_model_free(model: *mut DeapModel) {
    free(model)
}

/// Thresholds probabilities at 0.5 (ties to foreground).
///
/// # Safety
/// `dims` must hold 3 values; `probs` must hold their product.
#[no_mangle]
pub unsafe extern "C" fn deap_mask_from_probabilities(
    dims: *const usize,
    probs: *const f32,
    len: usize,
    out: *mut *mut DeapMask,
) -> i32 {
    guard(|| unsafe {
        let p = slice(probs, len, "probs")?;
        let bits = p.iter().map(|&x| u8::from(f64::from(x) >= THRESHOLD)).collect();
        let m = Mask::new(dims3(dims)?, bits)?;
        self::out(out, boxed(DeapMask(m)), "out")
    })
}

/// DICE and NSD (tolerance `tau` voxels) of `pred` against `gt`.
///
/// # Safety
/// Masks must come from this library; outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn deap_metrics(
    pred: *const DeapMask,
    gt: *const DeapMask,
    tau: f64,
    out_dice: *mut f64,
    out_nsd: *mut f64,
) -> i32 {
    guard(|| unsafe {
        let (p, g) = (&obj(pred, "pred")?.0, &obj(gt, "gt")?.0);
        let (d, s) = (dice_score(p, g)?, nsd(p, g, tau)?);
        out(out_dice, d, "out_dice")?;
        out(out_nsd, s, "out_nsd")
    })
}

/// `(full - shared) / full` FLOPs of the dual prompter on `feature = [H, W, D, C]`
/// with `tokens` reduced tokens.
///
/// # Safety
/// `feature` must hold 4 values; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn deap_sharing_reduction(
    feature: *const usize,
    tokens: usize,
    flops_per_mac: u64,
    out: *mut f64,
) -> i32 {
    guard(|| unsafe {
        let f = slice(feature, 4, "feature")?;
        let shape = [f[0], f[1], f[2], f[3]];
        if shape.contains(&0) || tokens == 0 || tokens > f[0] * f[1] * f[2] || !(1..=2).contains(&flops_per_mac) {
            return Err(Error::InvalidArgument(format!(
                "feature {shape:?}, tokens {tokens}, flops per MAC {flops_per_mac}"
            ))
            .into());
        }
        let o = CostOptions {
            flops_per_mac,
            ..CostOptions::default()
        };
        self::out(out, sharing_reduction(shape, tokens, o), "out")
    })
}
