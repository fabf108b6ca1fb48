//! C ABI over the ir2qsm core.
//!
//! Objects cross the boundary as opaque handles created by `*_new`, `*_read`
//! or `*_load` functions and released with the matching `*_free`. Every
//! fallible function returns an [`Ir2Status`]; on failure the message is
//! available from [`ir2_last_error`] on the same thread. Panics are caught and
//! reported as `IR2_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ir2qsm::dipole::{forward_field, make_dipole_kernel, tkd_invert, Volume};
use ir2qsm::io::{read_qsmv, write_qsmv};
use ir2qsm::metrics::MetricsReport;
use ir2qsm::net::{Checkpoint, Network};
use ir2qsm::Error;

/// Result codes; values match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ir2Status {
    Ok = 0,
    /// A required pointer argument was null.
    Null = 1,
    /// Invalid configuration or argument value.
    Config = 2,
    /// File missing, unreadable or malformed.
    Io = 3,
    /// Shape mismatch or numeric failure.
    Shape = 4,
    /// Internal panic; the handle arguments should be treated as unusable.
    Panic = 5,
}

/// Susceptibility or field volume (float64 internally).
pub struct Ir2Volume(Volume);

/// Trained network loaded from a checkpoint.
pub struct Ir2Network(Network<f32>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> Ir2Status {
    match e.exit_code() {
        2 => Ir2Status::Config,
        3 => Ir2Status::Io,
        _ => Ir2Status::Shape,
    }
}

struct Fail(Ir2Status, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(Ir2Status::Null, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> Ir2Status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            Ir2Status::Ok
        }
        Ok(Err(Fail(s, m))) => {
            set_error(&m);
            s
        }
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {m}"));
            Ir2Status::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(Ir2Status::Config, format!("`{what}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn volume_arg<'a>(v: *const Ir2Volume, what: &str) -> Result<&'a Volume, Fail> {
    v.as_ref().map(|v| &v.0).ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or "" after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn ir2_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ir2_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a volume of `nx·ny·nz` voxels, x fastest. `data` may be null for
/// an all-zero volume; otherwise it must hold `nx·ny·nz` floats.
///
/// # Safety
/// `data` must be null or valid for `nx·ny·nz` reads; `out` must be valid
/// for one write.
#[no_mangle]
pub unsafe extern "C" fn ir2_volume_new(
    nx: usize,
    ny: usize,
    nz: usize,
    voxel_size_mm: *const f64,
    data: *const f32,
    out: *mut *mut Ir2Volume,
) -> Ir2Status {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if voxel_size_mm.is_null() {
            return Err(null("voxel_size_mm"));
        }
        let vs = std::slice::from_raw_parts(voxel_size_mm, 3);
        let dims = [nx, ny, nz];
        let n = nx
            .checked_mul(ny)
            .and_then(|v| v.checked_mul(nz))
            .ok_or_else(|| Fail(Ir2Status::Shape, "dims overflow".into()))?;
        let v = if data.is_null() {
            Volume::zeros(dims, [vs[0], vs[1], vs[2]])?
        } else {
            let vals = std::slice::from_raw_parts(data, n).iter().map(|&x| x as f64).collect();
            Volume::new(dims, [vs[0], vs[1], vs[2]], vals)?
        };
        put(out, Ir2Volume(v))
    })
}

/// Reads a QSMV file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ir2_volume_read(path: *const c_char, out: *mut *mut Ir2Volume) -> Ir2Status {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = path_arg(path, "path")?;
        put(out, Ir2Volume(read_qsmv(&p)?))
    })
}

/// Writes a QSMV file.
///
/// # Safety
/// `v` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ir2_volume_write(v: *const Ir2Volume, path: *const c_char) -> Ir2Status {
    guard(|| {
        let v = volume_arg(v, "volume")?;
        let p = path_arg(path, "path")?;
        Ok(write_qsmv(&p, v)?)
    })
}

/// Stores the extents (x, y, z) into `dims[0..3]`.
///
/// # Safety
/// `v` must be a live handle; `dims` must be valid for three writes.
#[no_mangle]
pub unsafe extern "C" fn ir2_volume_dims(v: *const Ir2Volume, dims: *mut usize) -> Ir2Status {
    guard(|| {
        let v = volume_arg(v, "volume")?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        std::slice::from_raw_parts_mut(dims, 3).copy_from_slice(&v.dims());
        Ok(())
    })
}

/// Copies the voxel values (x fastest) into `dst`, which holds `len` floats.
/// `len` must equal the voxel count.
///
/// # Safety
/// `v` must be a live handle; `dst` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ir2_volume_copy_data(v: *const Ir2Volume, dst: *mut f32, len: usize) -> Ir2Status {
    guard(|| {
        let v = volume_arg(v, "volume")?;
        if dst.is_null() {
            return Err(null("dst"));
        }
        if len != v.len() {
            return Err(Fail(Ir2Status::Shape, format!("buffer holds {len} values, volume has {}", v.len())));
        }
        let d = std::slice::from_raw_parts_mut(dst, len);
        for (o, &x) in d.iter_mut().zip(v.values()) {
            *o = x as f32;
        }
        Ok(())
    })
}

/// Releases a volume. Null is ignored.
///
/// # Safety
/// `v` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ir2_volume_free(v: *mut Ir2Volume) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

/// Local field of a susceptibility map (circular convolution with the
/// dipole kernel, B0 along z).
///
/// # Safety
/// `chi` must be a live handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ir2_forward_field(chi: *const Ir2Volume, out: *mut *mut Ir2Volume) -> Ir2Status {
    guard(|| {
        let chi = volume_arg(chi, "chi")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let k = make_dipole_kernel(chi.dims(), chi.voxel_size_mm())?;
        put(out, Ir2Volume(forward_field(chi, &k)?))
    })
}

/// Truncated k-space division with the given kernel threshold.
///
/// # Safety
/// `field` must be a live handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ir2_tkd_invert(field: *const Ir2Volume, threshold: f64, out: *mut *mut Ir2Volume) -> Ir2Status {
    guard(|| {
        let f = volume_arg(field, "field")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let k = make_dipole_kernel(f.dims(), f.voxel_size_mm())?;
        put(out, Ir2Volume(tkd_invert(f, &k, threshold)?))
    })
}

/// Loads a trained network from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ir2_network_load(path: *const c_char, out: *mut *mut Ir2Network) -> Ir2Status {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = path_arg(path, "path")?;
        put(out, Ir2Network(Checkpoint::load(&p)?.to_network()?))
    })
}

/// Number of U-net iterations T of a loaded network.
///
/// # Safety
/// `net` must be a live handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ir2_network_iterations(net: *const Ir2Network, out: *mut usize) -> Ir2Status {
    guard(|| {
        let n = net.as_ref().ok_or_else(|| null("net"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = n.0.config().iterations;
        Ok(())
    })
}

/// Eval-mode reconstruction. Field extents must be multiples of 8.
/// `latents` may be null; otherwise it must hold T slots, which receive the
/// per-iteration maps as new handles.
///
/// # Safety
/// Handles must be live; `out` valid for one write; `latents` null or valid
/// for T writes.
#[no_mangle]
pub unsafe extern "C" fn ir2_network_reconstruct(
    net: *const Ir2Network,
    field: *const Ir2Volume,
    out: *mut *mut Ir2Volume,
    latents: *mut *mut Ir2Volume,
) -> Ir2Status {
    guard(|| {
        let n = net.as_ref().ok_or_else(|| null("net"))?;
        let f = volume_arg(field, "field")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (chi, lat) = n.0.reconstruct(f)?;
        if !latents.is_null() {
            for (t, l) in lat.into_iter().enumerate() {
                put(latents.add(t), Ir2Volume(l))?;
            }
        }
        put(out, Ir2Volume(chi))
    })
}

/// Releases a network. Null is ignored.
///
/// # Safety
/// `net` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ir2_network_free(net: *mut Ir2Network) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// NRMSE (%), HFEN (%) and SSIM (fraction) of `pred` against `gt` over all
/// voxels. A zero reference yields NaN rather than an error. Any output
/// pointer may be null.
///
/// # Safety
/// Handles must be live; output pointers null or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ir2_metrics(
    pred: *const Ir2Volume,
    gt: *const Ir2Volume,
    nrmse_percent: *mut f64,
    hfen_percent: *mut f64,
    ssim: *mut f64,
) -> Ir2Status {
    guard(|| {
        let p = volume_arg(pred, "pred")?;
        let g = volume_arg(gt, "gt")?;
        let r = MetricsReport::compute_tolerant(p, g, None, None, Default::default())?;
        for (ptr, v) in [(nrmse_percent, r.nrmse_percent), (hfen_percent, r.hfen_percent), (ssim, r.ssim)] {
            if !ptr.is_null() {
                *ptr = v;
            }
        }
        Ok(())
    })
}
