//! C interface to `ldct-core`.
//!
//! Objects are opaque handles created by `*_new`/`*_load` functions and
//! released with the matching `*_free`. Every fallible call returns an
//! [`LdctStatus`]; on failure a message for the calling thread is available
//! from [`ldct_last_error_message`]. Arrays are row-major `double` buffers
//! whose lengths the caller passes explicitly: images are `height × width`,
//! sinograms `n_views × n_bins` in the post-log domain.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ldct_core::metrics;
use ldct_core::pfbs::checkpoint;
use ldct_core::pfbs::UnrolledModel;
use ldct_core::{Error, FbpOperator, Image, ImageShape, Projector, ScanGeometry, Sinogram, SinogramDomain};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LdctStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidParameter = 2,
    ShapeMismatch = 3,
    UnknownPreset = 4,
    Container = 5,
    Config = 6,
    Data = 7,
    Numeric = 8,
    Io = 9,
    InvalidUtf8 = 10,
    Panic = 11,
}

impl From<&Error> for LdctStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidParameter(_) => LdctStatus::InvalidParameter,
            Error::ShapeMismatch { .. } => LdctStatus::ShapeMismatch,
            Error::UnknownPreset(_) => LdctStatus::UnknownPreset,
            Error::Container { .. } => LdctStatus::Container,
            Error::Config(_) => LdctStatus::Config,
            Error::Data(_) => LdctStatus::Data,
            Error::Numeric(_) => LdctStatus::Numeric,
            Error::Io { .. } => LdctStatus::Io,
        }
    }
}

/// Scan geometry.
pub struct LdctGeometry {
    inner: ScanGeometry,
}

/// Fan-beam forward projector and its adjoint for one image grid.
pub struct LdctProjector {
    inner: Projector,
}

/// Filtered backprojection for one image grid.
pub struct LdctFbp {
    inner: FbpOperator,
}

/// Trained unrolled reconstruction model.
pub struct LdctModel {
    inner: UnrolledModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(LdctStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(LdctStatus::from(&e), e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn guard(body: impl FnOnce() -> Outcome) -> LdctStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => LdctStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            LdctStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(LdctStatus::NullPointer, format!("`{name}` is NULL"))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn input<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn string<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(LdctStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

fn copy_out(values: &[f64], out: &mut [f64]) -> Outcome {
    if values.len() != out.len() {
        return Err(Failure(
            LdctStatus::ShapeMismatch,
            format!("output buffer holds {} values, result has {}", out.len(), values.len()),
        ));
    }
    out.copy_from_slice(values);
    Ok(())
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Outcome {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn sinogram(g: &ScanGeometry, values: &[f64]) -> Result<Sinogram, Failure> {
    Ok(Sinogram::from_values(
        g.n_views(),
        g.n_bins(),
        SinogramDomain::PostLog,
        values.to_vec(),
    )?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ldct_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Bytes needed to hold the calling thread's last error message, including
/// the terminating NUL; 0 when there is none.
#[no_mangle]
pub extern "C" fn ldct_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |m| m.as_bytes_with_nul().len()))
}

/// Copies the last error message into `buf` (truncated, always
/// NUL-terminated when `len > 0`) and returns the bytes written without the
/// NUL.
///
/// # Safety
/// `buf` must be NULL or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ldct_last_error_message(buf: *mut c_char, len: usize) -> usize {
    if buf.is_null() || len == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[][..], |m| m.as_bytes());
        let n = bytes.len().min(len - 1);
        ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
        *buf.add(n) = 0;
        n
    })
}

/// Looks up a geometry preset (`"desk_small"`, `"paper_full"`).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ldct_geometry_preset(name: *const c_char, out: *mut *mut LdctGeometry) -> LdctStatus {
    guard(|| {
        let inner = ScanGeometry::preset(string(name, "name")?)?;
        store(out, LdctGeometry { inner })
    })
}

/// Number of views and detector bins.
///
/// # Safety
/// `geometry` must be a live handle; `n_views` and `n_bins` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ldct_geometry_dims(
    geometry: *const LdctGeometry,
    n_views: *mut usize,
    n_bins: *mut usize,
) -> LdctStatus {
    guard(|| {
        let g = &handle(geometry, "geometry")?.inner;
        if n_views.is_null() || n_bins.is_null() {
            return Err(null("n_views/n_bins"));
        }
        *n_views = g.n_views();
        *n_bins = g.n_bins();
        Ok(())
    })
}

/// Reconstructed field of view (cm).
///
/// # Safety
/// `geometry` must be a live handle and `fov` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ldct_geometry_image_fov(geometry: *const LdctGeometry, fov: *mut f64) -> LdctStatus {
    guard(|| {
        let g = &handle(geometry, "geometry")?.inner;
        *fov.as_mut().ok_or_else(|| null("fov"))? = g.image_fov();
        Ok(())
    })
}

/// # Safety
/// `geometry` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ldct_geometry_free(geometry: *mut LdctGeometry) {
    if !geometry.is_null() {
        drop(Box::from_raw(geometry));
    }
}

/// Projector for a `width × height` grid with square pixels of
/// `pixel_size` cm.
///
/// # Safety
/// `geometry` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ldct_projector_new(
    geometry: *const LdctGeometry,
    width: usize,
    height: usize,
    pixel_size: f64,
    out: *mut *mut LdctProjector,
) -> LdctStatus {
    guard(|| {
        let g = handle(geometry, "geometry")?.inner;
        let shape = ImageShape::new(width, height, pixel_size)?;
        store(
            out,
            LdctProjector {
                inner: Projector::new(g, shape),
            },
        )
    })
}

/// `y = A x`.
///
/// # Safety
/// `x` must hold `x_len` readable values and `y` `y_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ldct_projector_forward(
    projector: *const LdctProjector,
    x: *const f64,
    x_len: usize,
    y: *mut f64,
    y_len: usize,
) -> LdctStatus {
    guard(|| {
        let p = &handle(projector, "projector")?.inner;
        let image = Image::from_values(p.image_shape(), input(x, x_len, "x")?.to_vec())?;
        copy_out(p.forward(&image)?.values(), output(y, y_len, "y")?)
    })
}

/// `x = Aᵀ y`.
///
/// # Safety
/// `y` must hold `y_len` readable values and `x` `x_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ldct_projector_back(
    projector: *const LdctProjector,
    y: *const f64,
    y_len: usize,
    x: *mut f64,
    x_len: usize,
) -> LdctStatus {
    guard(|| {
        let p = &handle(projector, "projector")?.inner;
        let sino = sinogram(p.geometry(), input(y, y_len, "y")?)?;
        copy_out(p.back(&sino)?.values(), output(x, x_len, "x")?)
    })
}

/// # Safety
/// `projector` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ldct_projector_free(projector: *mut LdctProjector) {
    if !projector.is_null() {
        drop(Box::from_raw(projector));
    }
}

/// FBP operator for a `width × height` grid.
///
/// # Safety
/// `geometry` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ldct_fbp_new(
    geometry: *const LdctGeometry,
    width: usize,
    height: usize,
    pixel_size: f64,
    out: *mut *mut LdctFbp,
) -> LdctStatus {
    guard(|| {
        let g = handle(geometry, "geometry")?.inner;
        let shape = ImageShape::new(width, height, pixel_size)?;
        store(
            out,
            LdctFbp {
                inner: FbpOperator::new(g, shape),
            },
        )
    })
}

/// # Safety
/// `y` must hold `y_len` readable values and `x` `x_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ldct_fbp_reconstruct(
    fbp: *const LdctFbp,
    y: *const f64,
    y_len: usize,
    x: *mut f64,
    x_len: usize,
) -> LdctStatus {
    guard(|| {
        let f = &handle(fbp, "fbp")?.inner;
        let sino = sinogram(f.geometry(), input(y, y_len, "y")?)?;
        copy_out(f.reconstruct(&sino)?.values(), output(x, x_len, "x")?)
    })
}

/// # Safety
/// `fbp` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ldct_fbp_free(fbp: *mut LdctFbp) {
    if !fbp.is_null() {
        drop(Box::from_raw(fbp));
    }
}

/// Loads a model from a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated path and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ldct_model_load(dir: *const c_char, out: *mut *mut LdctModel) -> LdctStatus {
    guard(|| {
        let inner = checkpoint::load_model(Path::new(string(dir, "dir")?))?;
        store(out, LdctModel { inner })
    })
}

/// Image grid of the model; `pixel_size` may be NULL.
///
/// # Safety
/// `model` must be a live handle; `width` and `height` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ldct_model_image_size(
    model: *const LdctModel,
    width: *mut usize,
    height: *mut usize,
    pixel_size: *mut f64,
) -> LdctStatus {
    guard(|| {
        let shape = handle(model, "model")?.inner.image_shape();
        if width.is_null() || height.is_null() {
            return Err(null("width/height"));
        }
        *width = shape.width;
        *height = shape.height;
        if let Some(p) = pixel_size.as_mut() {
            *p = shape.pixel_size;
        }
        Ok(())
    })
}

/// Reconstructs a sinogram in the model's geometry.
///
/// # Safety
/// `y` must hold `y_len` readable values and `x` `x_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ldct_model_reconstruct(
    model: *const LdctModel,
    y: *const f64,
    y_len: usize,
    x: *mut f64,
    x_len: usize,
) -> LdctStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let sino = sinogram(m.geometry(), input(y, y_len, "y")?)?;
        copy_out(m.reconstruct(&sino)?.values(), output(x, x_len, "x")?)
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ldct_model_free(model: *mut LdctModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// PSNR in dB of `x_star` against the reference `x`; `+inf` when equal.
///
/// # Safety
/// `x` and `x_star` must hold `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ldct_psnr(x: *const f64, x_star: *const f64, len: usize, out: *mut f64) -> LdctStatus {
    guard(|| {
        let v = metrics::psnr(input(x, len, "x")?, input(x_star, len, "x_star")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}

/// # Safety
/// `x` and `x_star` must hold `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ldct_rmse(x: *const f64, x_star: *const f64, len: usize, out: *mut f64) -> LdctStatus {
    guard(|| {
        let v = metrics::rmse(input(x, len, "x")?, input(x_star, len, "x_star")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}

/// Mean SSIM of two `width × height` images.
///
/// # Safety
/// `x` and `x_star` must hold `width * height` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ldct_ssim(
    x: *const f64,
    x_star: *const f64,
    width: usize,
    height: usize,
    out: *mut f64,
) -> LdctStatus {
    guard(|| {
        let shape = ImageShape::new(width, height, 1.0)?;
        let n = width * height;
        let a = Image::from_values(shape, input(x, n, "x")?.to_vec())?;
        let b = Image::from_values(shape, input(x_star, n, "x_star")?.to_vec())?;
        *out.as_mut().ok_or_else(|| null("out"))? = metrics::ssim(&a, &b)?;
        Ok(())
    })
}
