//! C ABI for the hemiseg model and metrics.
//!
//! Every function returns an [`HsStatus`]; on failure a message is kept per
//! thread and can be read with [`hs_last_error`]. Models and ensembles are
//! opaque handles released with their `_free` functions. Volumes cross the
//! boundary as contiguous arrays in `(D, H, W)` order, x fastest.
//!
//! Pointer contract for every `unsafe` entry point: pointers are either null
//! (reported as `NullPointer`) or valid for the documented number of
//! elements; handles come from this library and are not used after `_free`.
#![allow(clippy::missing_safety_doc, clippy::too_many_arguments)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use hemiseg::metrics::{dice, hausdorff_mm};
use hemiseg::network::{count_parameters, ensemble_predict, load_checkpoint, save_checkpoint, segment, Model, NetworkConfig};
use hemiseg::volume::{BinaryMask, VolumeGrid};
use hemiseg::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Data = 4,
    Io = 5,
    Numerical = 6,
    Panic = 7,
}

/// A trained or freshly initialized network.
pub struct HsModel(Model);

/// Two or more models combined by majority vote.
pub struct HsEnsemble(Vec<Model>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> HsStatus {
    match e {
        Error::Shape(_) => HsStatus::Shape,
        Error::InvalidArgument(_) => HsStatus::InvalidArgument,
        Error::Numerical(_) => HsStatus::Numerical,
        Error::Io { .. } => HsStatus::Io,
        _ => HsStatus::Data,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HsStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            HsStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            HsStatus::Panic
        }
    }
}

fn nonnull<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    // SAFETY: caller passes a valid pointer or null.
    unsafe { p.as_ref() }.ok_or(Fail::Null(what))
}

fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    // SAFETY: non-null, NUL-terminated by contract.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail::Lib(Error::InvalidArgument("path is not valid UTF-8".into())))?;
    Ok(PathBuf::from(s))
}

fn extents_of(d: usize, h: usize, w: usize) -> Result<([usize; 3], usize), Fail> {
    let n = d
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| Fail::Lib(Error::InvalidArgument("extents overflow".into())))?;
    Ok(([d, h, w], n))
}

fn slice_arg<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: caller guarantees `n` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, n) })
}

fn spacing_arg(p: *const f64) -> Result<[f64; 3], Fail> {
    let s = slice_arg(p, 3, "spacing")?;
    Ok([s[0], s[1], s[2]])
}

fn mask_arg(p: *const u8, extents: [usize; 3], n: usize, spacing: [f64; 3], what: &'static str) -> Result<BinaryMask, Fail> {
    let v = slice_arg(p, n, what)?;
    Ok(BinaryMask::new(extents, spacing, v.iter().map(|&b| b != 0).collect())?)
}

fn write_out<T>(out: *mut T, v: T, what: &'static str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: non-null, writable by contract.
    unsafe { out.write(v) };
    Ok(())
}

/// Message for the most recent failure on this thread; empty after a
/// success. Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn hs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Trainable parameter count for the default architecture at `filter_rate`.
#[no_mangle]
pub unsafe extern "C" fn hs_count_parameters(filter_rate: f64, out: *mut usize) -> HsStatus {
    guard(|| {
        let cfg = NetworkConfig {
            filter_rate,
            ..NetworkConfig::default()
        };
        write_out(out, count_parameters(&cfg)?, "out")
    })
}

/// Freshly initialized model (untrained); mostly useful for testing bindings.
#[no_mangle]
pub unsafe extern "C" fn hs_model_new(filter_rate: f64, seed: u64, out: *mut *mut HsModel) -> HsStatus {
    guard(|| {
        let cfg = NetworkConfig {
            filter_rate,
            seed,
            ..NetworkConfig::default()
        };
        let m = Box::new(HsModel(Model::new(&cfg)?));
        write_out(out, Box::into_raw(m), "out")
    })
}

/// Loads a checkpoint written by `hemiseg train`.
#[no_mangle]
pub unsafe extern "C" fn hs_model_load(path: *const c_char, out: *mut *mut HsModel) -> HsStatus {
    guard(|| {
        let m = Box::new(HsModel(load_checkpoint(path_arg(path)?)?));
        write_out(out, Box::into_raw(m), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn hs_model_save(model: *const HsModel, path: *const c_char) -> HsStatus {
    guard(|| {
        let m = nonnull(model, "model")?;
        Ok(save_checkpoint(&m.0, path_arg(path)?)?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn hs_model_num_parameters(model: *const HsModel, out: *mut usize) -> HsStatus {
    guard(|| write_out(out, nonnull(model, "model")?.0.num_parameters(), "out"))
}

/// Releases a model; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn hs_model_free(model: *mut HsModel) {
    if !model.is_null() {
        // SAFETY: pointer came from Box::into_raw in this library.
        drop(unsafe { Box::from_raw(model) });
    }
}

fn grid_arg(values: *const f64, d: usize, h: usize, w: usize, spacing: *const f64) -> Result<(VolumeGrid, usize), Fail> {
    let (extents, n) = extents_of(d, h, w)?;
    let v = slice_arg(values, n, "values")?;
    Ok((VolumeGrid::new(extents, spacing_arg(spacing)?, v.to_vec())?, n))
}

fn write_labels(out: *mut u8, out_len: usize, labels: &[u8]) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out_labels"));
    }
    if out_len < labels.len() {
        return Err(Fail::Lib(Error::InvalidArgument(format!(
            "output buffer holds {out_len} labels, {} needed",
            labels.len()
        ))));
    }
    // SAFETY: checked non-null and large enough.
    unsafe { std::ptr::copy_nonoverlapping(labels.as_ptr(), out, labels.len()) };
    Ok(())
}

/// Segments one volume (standardized internally) into labels 0/1/2
/// written to `out_labels`, which must hold `d * h * w` bytes. Extents must
/// be divisible by 16.
#[no_mangle]
pub unsafe extern "C" fn hs_segment(
    model: *const HsModel,
    values: *const f64,
    d: usize,
    h: usize,
    w: usize,
    spacing: *const f64,
    out_labels: *mut u8,
    out_len: usize,
) -> HsStatus {
    guard(|| {
        let m = nonnull(model, "model")?;
        let (grid, _) = grid_arg(values, d, h, w, spacing)?;
        write_labels(out_labels, out_len, segment(&m.0, &grid)?.labels())
    })
}

/// Builds an ensemble from copies of `n` models (n >= 2); the inputs stay
/// owned by the caller.
#[no_mangle]
pub unsafe extern "C" fn hs_ensemble_new(models: *const *const HsModel, n: usize, out: *mut *mut HsEnsemble) -> HsStatus {
    guard(|| {
        let ptrs = slice_arg(models, n, "models")?;
        if n < 2 {
            return Err(Fail::Lib(Error::InvalidArgument(format!("an ensemble needs at least 2 models, got {n}"))));
        }
        let ms = ptrs
            .iter()
            .map(|&p| nonnull(p, "models[i]").map(|m| m.0.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        write_out(out, Box::into_raw(Box::new(HsEnsemble(ms))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn hs_ensemble_free(ensemble: *mut HsEnsemble) {
    if !ensemble.is_null() {
        // SAFETY: pointer came from Box::into_raw in this library.
        drop(unsafe { Box::from_raw(ensemble) });
    }
}

/// Majority-vote segmentation; same buffer contract as [`hs_segment`].
#[no_mangle]
pub unsafe extern "C" fn hs_ensemble_segment(
    ensemble: *const HsEnsemble,
    values: *const f64,
    d: usize,
    h: usize,
    w: usize,
    spacing: *const f64,
    out_labels: *mut u8,
    out_len: usize,
) -> HsStatus {
    guard(|| {
        let e = nonnull(ensemble, "ensemble")?;
        let (grid, _) = grid_arg(values, d, h, w, spacing)?;
        write_labels(out_labels, out_len, ensemble_predict(&e.0, &grid)?.labels())
    })
}

/// Dice overlap of two masks given as bytes (nonzero = inside).
#[no_mangle]
pub unsafe extern "C" fn hs_dice(a: *const u8, b: *const u8, d: usize, h: usize, w: usize, out: *mut f64) -> HsStatus {
    guard(|| {
        let (extents, n) = extents_of(d, h, w)?;
        let ma = mask_arg(a, extents, n, [1.0; 3], "a")?;
        let mb = mask_arg(b, extents, n, [1.0; 3], "b")?;
        write_out(out, dice(&ma, &mb)?, "out")
    })
}

/// Symmetric boundary Hausdorff distance in mm; `spacing` points to
/// `(sd, sh, sw)`. Fails on an empty mask.
#[no_mangle]
pub unsafe extern "C" fn hs_hausdorff_mm(
    a: *const u8,
    b: *const u8,
    d: usize,
    h: usize,
    w: usize,
    spacing: *const f64,
    out: *mut f64,
) -> HsStatus {
    guard(|| {
        let (extents, n) = extents_of(d, h, w)?;
        let sp = spacing_arg(spacing)?;
        let ma = mask_arg(a, extents, n, sp, "a")?;
        let mb = mask_arg(b, extents, n, sp, "b")?;
        write_out(out, hausdorff_mm(&ma, &mb, sp)?, "out")
    })
}
