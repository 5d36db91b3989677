//! C ABI over the `mmsfm` library.
//!
//! Every fallible function returns an [`MmsfmStatus`]. On failure the message
//! is stored per thread and readable through [`mmsfm_last_error_message`].
//! Handles are opaque and must be released with their `_free` function.
//! Arrays are row-major `f64` buffers; `*_len` arguments count elements.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mmsfm::metrics::{mmd, wasserstein, Kernel};
use mmsfm::nn::Mlp;
use mmsfm::ot::{exact_plan, Matrix};
use mmsfm::sim::{integrate_ode, integrate_sde, uniform_grid, SdeSpec};
use mmsfm::spline::{Knots, PiecewiseCubic, SplineFamily};
use mmsfm::{Error, Points};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmsfmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    OutOfRange = 3,
    DegeneratePlan = 4,
    SingularVariance = 5,
    Diverged = 6,
    Parse = 7,
    Checkpoint = 8,
    Io = 9,
    Solver = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmsfmSplineFamily {
    MonotoneHermite = 0,
    NaturalCubic = 1,
}

/// Fitted piecewise-cubic curve.
pub struct MmsfmSpline {
    inner: PiecewiseCubic,
}

/// Trained flow and score networks with a diffusion scale.
pub struct MmsfmModel {
    flow: Mlp,
    score: Mlp,
    sigma: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(MmsfmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let s = match e {
            Error::InvalidInput(_) => MmsfmStatus::InvalidInput,
            Error::OutOfRange { .. } => MmsfmStatus::OutOfRange,
            Error::DegeneratePlan { .. } => MmsfmStatus::DegeneratePlan,
            Error::SingularVariance { .. } => MmsfmStatus::SingularVariance,
            Error::TrainingDiverged { .. } | Error::IntegrationDiverged { .. } => {
                MmsfmStatus::Diverged
            }
            Error::Parse { .. } | Error::Json(_) => MmsfmStatus::Parse,
            Error::Checkpoint(_) => MmsfmStatus::Checkpoint,
            Error::Io(_) => MmsfmStatus::Io,
            Error::Solver(_) => MmsfmStatus::Solver,
        };
        Fail(s, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MmsfmStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MmsfmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MmsfmStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            MmsfmStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn checked_len(a: usize, b: usize) -> Result<usize, Fail> {
    a.checked_mul(b)
        .ok_or_else(|| Fail(MmsfmStatus::InvalidInput, "array size overflows".into()))
}

unsafe fn points(p: *const f64, rows: usize, dim: usize, what: &str) -> Result<Points, Fail> {
    let data = slice(p, checked_len(rows, dim)?, what)?.to_vec();
    Ok(Points::new(data, rows, dim)?)
}

unsafe fn path<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MmsfmStatus::InvalidInput, format!("{what} is not UTF-8")))
}

fn need(out_len: usize, want: usize) -> Result<(), Fail> {
    if out_len < want {
        return Err(Fail(
            MmsfmStatus::BufferTooSmall,
            format!("output buffer holds {out_len} values, {want} required"),
        ));
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mmsfm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mmsfm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Fits a spline through `n_knots` knots. `values` is `n_knots × dim`.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmsfm_spline_fit(
    family: MmsfmSplineFamily,
    times: *const f64,
    n_knots: usize,
    values: *const f64,
    dim: usize,
    out: *mut *mut MmsfmSpline,
) -> MmsfmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let t = slice(times, n_knots, "times")?.to_vec();
        let v = points(values, n_knots, dim, "values")?;
        let fam = match family {
            MmsfmSplineFamily::MonotoneHermite => SplineFamily::MonotoneHermite,
            MmsfmSplineFamily::NaturalCubic => SplineFamily::NaturalCubic,
        };
        let inner = fam.fit(Knots::new(t, v)?)?;
        *out = Box::into_raw(Box::new(MmsfmSpline { inner }));
        Ok(())
    })
}

/// Dimension of the spline's values, or 0 for a null handle.
///
/// # Safety
/// `spline` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmsfm_spline_dim(spline: *const MmsfmSpline) -> usize {
    spline.as_ref().map_or(0, |s| s.inner.dim())
}

/// Writes the spline value at `t` into `out` (at least `dim` values).
///
/// # Safety
/// `spline` must be a live handle; `out` valid for `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn mmsfm_spline_eval(
    spline: *const MmsfmSpline,
    t: f64,
    out: *mut f64,
    out_len: usize,
) -> MmsfmStatus {
    guard(|| {
        let s = spline.as_ref().ok_or_else(|| null("spline"))?;
        need(out_len, s.inner.dim())?;
        let o = slice_mut(out, s.inner.dim(), "out")?;
        Ok(s.inner.eval_into(t, o)?)
    })
}

/// Writes the time derivative at `t` into `out` (at least `dim` values).
///
/// # Safety
/// `spline` must be a live handle; `out` valid for `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn mmsfm_spline_eval_derivative(
    spline: *const MmsfmSpline,
    t: f64,
    out: *mut f64,
    out_len: usize,
) -> MmsfmStatus {
    guard(|| {
        let s = spline.as_ref().ok_or_else(|| null("spline"))?;
        need(out_len, s.inner.dim())?;
        let o = slice_mut(out, s.inner.dim(), "out")?;
        Ok(s.inner.eval_derivative_into(t, o)?)
    })
}

/// Releases a spline. Null is a no-op.
///
/// # Safety
/// `spline` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mmsfm_spline_free(spline: *mut MmsfmSpline) {
    if !spline.is_null() {
        drop(Box::from_raw(spline));
    }
}

fn load_mlp(p: &str) -> Result<Mlp, Fail> {
    let f = File::open(p).map_err(|e| Fail(MmsfmStatus::Io, format!("{p}: {e}")))?;
    Ok(Mlp::read_checkpoint(BufReader::new(f))?.0)
}

/// Loads flow and score checkpoints written by the training command.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmsfm_model_load(
    flow_path: *const c_char,
    score_path: *const c_char,
    sigma: f64,
    out: *mut *mut MmsfmModel,
) -> MmsfmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let flow = load_mlp(path(flow_path, "flow_path")?)?;
        let score = load_mlp(path(score_path, "score_path")?)?;
        if flow.widths() != score.widths() {
            return Err(Fail(
                MmsfmStatus::Checkpoint,
                "flow and score checkpoints disagree on architecture".into(),
            ));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Fail(
                MmsfmStatus::InvalidInput,
                "sigma must be nonnegative".into(),
            ));
        }
        *out = Box::into_raw(Box::new(MmsfmModel { flow, score, sigma }));
        Ok(())
    })
}

/// State dimension of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmsfm_model_dim(model: *const MmsfmModel) -> usize {
    model.as_ref().map_or(0, |m| m.flow.dim())
}

/// Number of time points on the uniform integration grid over `[t0, t1]`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmsfm_grid_len(
    t0: f64,
    t1: f64,
    steps_per_unit: usize,
    out: *mut usize,
) -> MmsfmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = uniform_grid(t0, t1, steps_per_unit)?.len();
        Ok(())
    })
}

/// Integrates `n_particles` initial states over `[t0, t1]`. Writes the full
/// trajectory, particle-major: `out[(p·T + n)·dim + j]` with `T` from
/// [`mmsfm_grid_len`]. Nonzero `deterministic` integrates the flow ODE.
///
/// # Safety
/// `model` must be a live handle; buffers valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mmsfm_model_generate(
    model: *const MmsfmModel,
    x0: *const f64,
    n_particles: usize,
    t0: f64,
    t1: f64,
    steps_per_unit: usize,
    seed: u64,
    deterministic: i32,
    out: *mut f64,
    out_len: usize,
) -> MmsfmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let d = m.flow.dim();
        let x = points(x0, n_particles, d, "x0")?;
        let grid = uniform_grid(t0, t1, steps_per_unit)?;
        let want = checked_len(checked_len(n_particles, grid.len())?, d)?;
        need(out_len, want)?;
        let traj = if deterministic != 0 {
            integrate_ode(&m.flow, &x, &grid)?
        } else {
            let spec = SdeSpec::new(&m.flow, Some(&m.score), m.sigma)?;
            integrate_sde(&spec, &x, &grid, seed)?
        };
        let o = slice_mut(out, want, "out")?;
        let mut k = 0;
        for p in 0..n_particles {
            for n in 0..grid.len() {
                o[k..k + d].copy_from_slice(traj.state(p, n));
                k += d;
            }
        }
        Ok(())
    })
}

/// Releases a model. Null is a no-op.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mmsfm_model_free(model: *mut MmsfmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Exact minimum-cost coupling for a `rows × cols` cost matrix and the
/// given marginal weights. Writes the `rows × cols` plan.
///
/// # Safety
/// Buffers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mmsfm_exact_plan(
    cost: *const f64,
    rows: usize,
    cols: usize,
    row_weights: *const f64,
    col_weights: *const f64,
    out_plan: *mut f64,
    out_len: usize,
) -> MmsfmStatus {
    guard(|| {
        let n = checked_len(rows, cols)?;
        let c = Matrix::new(rows, cols, slice(cost, n, "cost")?.to_vec())?;
        let rw = slice(row_weights, rows, "row_weights")?;
        let cw = slice(col_weights, cols, "col_weights")?;
        need(out_len, n)?;
        let plan = exact_plan(&c, rw, cw)?;
        slice_mut(out_plan, n, "out_plan")?.copy_from_slice(plan.matrix.as_slice());
        Ok(())
    })
}

/// Empirical Wasserstein cost with uniform weights: `p = 1` gives W₁,
/// `p = 2` gives W₂².
///
/// # Safety
/// Buffers must be valid for their stated lengths; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mmsfm_wasserstein(
    x: *const f64,
    nx: usize,
    y: *const f64,
    ny: usize,
    dim: usize,
    p: u32,
    out: *mut f64,
) -> MmsfmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let a = points(x, nx, dim, "x")?;
        let b = points(y, ny, dim, "y")?;
        *out = wasserstein(&a, &b, p)?;
        Ok(())
    })
}

/// Biased MMD² estimate with the Gaussian kernel `exp(−γ‖x−y‖²)`.
///
/// # Safety
/// Buffers must be valid for their stated lengths; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mmsfm_mmd_gaussian(
    x: *const f64,
    nx: usize,
    y: *const f64,
    ny: usize,
    dim: usize,
    gamma: f64,
    out: *mut f64,
) -> MmsfmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let a = points(x, nx, dim, "x")?;
        let b = points(y, ny, dim, "y")?;
        *out = mmd(&a, &b, &Kernel::Gaussian { gamma })?;
        Ok(())
    })
}
