//! C ABI for voxel I/O, IoU and single-image prediction from a trained
//! checkpoint.
//!
//! Objects cross the boundary as opaque handles created by a `*_new`/`*_load`
//! function and released by the matching `*_free`. Every fallible call
//! returns a [`PadmixStatus`]; on failure the message is kept per thread and
//! read with [`padmix_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use padmix::model::{PadMixNet, Variant};
use padmix::nn::ParamStore;
use padmix::trainer::load_checkpoint;
use padmix::voxel::{iou, parse_binvox, write_binvox, VoxelGrid};
use padmix::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadmixStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    MissingArtifact = 4,
    Numeric = 5,
    Io = 6,
    Format = 7,
    Panic = 8,
}

/// Voxel occupancy grid.
pub struct PadmixGrid {
    grid: VoxelGrid,
}

/// A trained network with its parameters.
pub struct PadmixModel {
    net: PadMixNet,
    store: ParamStore<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> PadmixStatus {
    match e {
        Error::Config(_) | Error::StageOrder(_) => PadmixStatus::Config,
        Error::MissingArtifact(_) => PadmixStatus::MissingArtifact,
        Error::NonFinite(_) | Error::GradCheck(_) | Error::EmptyUnion => PadmixStatus::Numeric,
        Error::Io { .. } => PadmixStatus::Io,
        Error::Binvox(_) | Error::Checkpoint(_) | Error::Csv(_) | Error::Json(_) => PadmixStatus::Format,
        _ => PadmixStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (PadmixStatus, String)>) -> PadmixStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PadmixStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            PadmixStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (PadmixStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PadmixStatus, String) {
    (PadmixStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (PadmixStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (PadmixStatus::InvalidArgument, "path is not UTF-8".into()))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length
/// excluding the terminator, so a caller can size the buffer.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn padmix_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn padmix_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a grid from `dim^3` values in x-outer, y-fastest order.
///
/// # Safety
/// `values` must point to `len` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn padmix_grid_new(
    dim: usize,
    values: *const f32,
    len: usize,
    out: *mut *mut PadmixGrid,
) -> PadmixStatus {
    guard(|| {
        if values.is_null() {
            return Err(null("values"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if dim.checked_pow(3) != Some(len) {
            return Err((PadmixStatus::InvalidArgument, format!("{len} values for dim {dim}")));
        }
        let v = std::slice::from_raw_parts(values, len).to_vec();
        let grid = VoxelGrid::from_values(dim, v).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(PadmixGrid { grid }));
        Ok(())
    })
}

/// Reads a binvox file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn padmix_grid_read_binvox(path: *const c_char, out: *mut *mut PadmixGrid) -> PadmixStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = std::fs::read(&path).map_err(|_| lib_err(Error::MissingArtifact(path.clone())))?;
        let grid = parse_binvox(&bytes).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(PadmixGrid { grid }));
        Ok(())
    })
}

/// Writes a binary grid as binvox.
///
/// # Safety
/// `grid` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn padmix_grid_write_binvox(grid: *const PadmixGrid, path: *const c_char) -> PadmixStatus {
    guard(|| {
        let g = grid.as_ref().ok_or_else(|| null("grid"))?;
        let path = path_arg(path)?;
        let bytes = write_binvox(&g.grid).map_err(lib_err)?;
        std::fs::write(&path, bytes).map_err(|e| lib_err(Error::io(&path, e)))
    })
}

/// Voxels per axis, or 0 for a null handle.
///
/// # Safety
/// `grid` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn padmix_grid_dim(grid: *const PadmixGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.grid.dim())
}

/// Copies the `dim^3` values into `out`.
///
/// # Safety
/// `grid` must be a live handle; `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn padmix_grid_values(grid: *const PadmixGrid, out: *mut f32, len: usize) -> PadmixStatus {
    guard(|| {
        let g = grid.as_ref().ok_or_else(|| null("grid"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let v = g.grid.values();
        if len != v.len() {
            return Err((PadmixStatus::InvalidArgument, format!("buffer holds {len}, grid has {}", v.len())));
        }
        ptr::copy_nonoverlapping(v.as_ptr(), out, len);
        Ok(())
    })
}

/// Intersection over union after binarizing both grids at `threshold`.
///
/// # Safety
/// `a` and `b` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn padmix_grid_iou(
    a: *const PadmixGrid,
    b: *const PadmixGrid,
    threshold: f64,
    out: *mut f64,
) -> PadmixStatus {
    guard(|| {
        let a = a.as_ref().ok_or_else(|| null("a"))?;
        let b = b.as_ref().ok_or_else(|| null("b"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = iou(&a.grid, &b.grid, threshold).map_err(lib_err)?;
        Ok(())
    })
}

/// Releases a grid. Null is ignored.
///
/// # Safety
/// `grid` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn padmix_grid_free(grid: *mut PadmixGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Loads a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn padmix_model_load(path: *const c_char, out: *mut *mut PadmixModel) -> PadmixStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = load_checkpoint(&path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(PadmixModel {
            net: ck.net,
            store: ck.state.store,
        }));
        Ok(())
    })
}

/// Output voxels per axis, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn padmix_model_dim(model: *const PadmixModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.geometry().dim)
}

/// Input image side length, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn padmix_model_image_size(model: *const PadmixModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.geometry().image_size)
}

/// 1 if the network expects a shape prior, 0 otherwise.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn padmix_model_uses_prior(model: *const PadmixModel) -> i32 {
    model
        .as_ref()
        .map_or(0, |m| i32::from(m.net.variant() == Variant::Prior))
}

/// Predicts an occupancy grid from a 2-channel image (silhouette plane then
/// depth plane, row-major). `prior` must be given exactly when the model
/// uses priors.
///
/// # Safety
/// `model` must be a live handle, `image` must hold `len` floats, `prior`
/// must be null or a live handle and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn padmix_model_predict(
    model: *const PadmixModel,
    image: *const f32,
    len: usize,
    prior: *const PadmixGrid,
    out: *mut *mut PadmixGrid,
) -> PadmixStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if image.is_null() {
            return Err(null("image"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let img = std::slice::from_raw_parts(image, len);
        let prior = prior.as_ref().map(|p| &p.grid);
        let trace = m.net.forward(&m.store, img, prior).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(PadmixGrid {
            grid: trace.prediction,
        }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn padmix_model_free(model: *mut PadmixModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
