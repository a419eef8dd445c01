//! C ABI for the kktrain Krylov solvers and experiment runner.
//!
//! Every fallible function returns a [`KktStatus`] code. On failure the
//! message is kept per thread and can be read with
//! [`kktrain_last_error_message`] until the next failing call on that
//! thread. Operators and experiments are opaque handles created and freed
//! on the Rust side. Panics never cross the boundary; they surface as
//! [`KktStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use kktrain::cli::{load_config, run_experiment, CliError, ExperimentConfig, RunOptions};
use kktrain::krylov::{minres, minres_qlp, KrylovSolution, SolveStatus, SolverConfig};
use kktrain::linops::{DenseMatrix, DenseOperator, LinearOperator, Vector};
use kktrain::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KktStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Config = 4,
    Io = 5,
    Numerical = 6,
    Panic = 7,
}

/// Outcome of a Krylov solve, mirroring the solver's status names.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KktSolveStatus {
    Converged = 0,
    MaxIters = 1,
    SingularMinLength = 2,
    Breakdown = 3,
}

impl From<SolveStatus> for KktSolveStatus {
    fn from(s: SolveStatus) -> Self {
        match s {
            SolveStatus::Converged => KktSolveStatus::Converged,
            SolveStatus::MaxIters => KktSolveStatus::MaxIters,
            SolveStatus::SingularMinLength => KktSolveStatus::SingularMinLength,
            SolveStatus::Breakdown => KktSolveStatus::Breakdown,
        }
    }
}

/// Solver settings. `max_iters = 0` selects the default cap.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct KktSolverConfig {
    pub rtol: f64,
    pub max_iters: usize,
    pub breakdown_tol: f64,
    pub transfer_cond: f64,
    pub rank_tol: f64,
    pub reorthogonalize: bool,
}

impl From<SolverConfig> for KktSolverConfig {
    fn from(c: SolverConfig) -> Self {
        KktSolverConfig {
            rtol: c.rtol,
            max_iters: c.max_iters.unwrap_or(0),
            breakdown_tol: c.breakdown_tol,
            transfer_cond: c.transfer_cond,
            rank_tol: c.rank_tol,
            reorthogonalize: c.reorthogonalize,
        }
    }
}

impl From<KktSolverConfig> for SolverConfig {
    fn from(c: KktSolverConfig) -> Self {
        SolverConfig {
            rtol: c.rtol,
            max_iters: (c.max_iters > 0).then_some(c.max_iters),
            breakdown_tol: c.breakdown_tol,
            transfer_cond: c.transfer_cond,
            rank_tol: c.rank_tol,
            reorthogonalize: c.reorthogonalize,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct KktSolveInfo {
    pub status: KktSolveStatus,
    pub iters: usize,
    pub qlp_iters: usize,
    pub residual_norm: f64,
    pub residual_estimate: f64,
    pub op_norm_estimate: f64,
    pub cond_estimate: f64,
}

impl From<&KrylovSolution> for KktSolveInfo {
    fn from(s: &KrylovSolution) -> Self {
        KktSolveInfo {
            status: s.status.into(),
            iters: s.iters,
            qlp_iters: s.qlp_iters,
            residual_norm: s.residual_norm,
            residual_estimate: s.residual_estimate,
            op_norm_estimate: s.op_norm_estimate,
            cond_estimate: s.cond_estimate,
        }
    }
}

/// `y = B x` for vectors of length `n`. Called on the thread that started the solve.
pub type KktMatvecFn = Option<unsafe extern "C" fn(user: *mut c_void, x: *const f64, y: *mut f64, n: usize)>;

/// Opaque symmetric operator.
pub struct KktOperator {
    inner: OperatorKind,
}

enum OperatorKind {
    Dense(DenseOperator),
    Callback(CallbackOperator),
}

struct CallbackOperator {
    n: usize,
    f: unsafe extern "C" fn(*mut c_void, *const f64, *mut f64, usize),
    user: *mut c_void,
}

// SAFETY: the solvers call `matvec` only from the thread that invoked them,
// and the caller owns whatever `user` points to for the handle's lifetime.
unsafe impl Sync for CallbackOperator {}
unsafe impl Send for CallbackOperator {}

impl LinearOperator for CallbackOperator {
    fn dim(&self) -> usize {
        self.n
    }
    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        // SAFETY: both buffers hold `n` doubles; the callback contract is documented on `KktMatvecFn`.
        unsafe { (self.f)(self.user, x.as_ptr(), y.as_mut_ptr(), self.n) }
    }
}

impl LinearOperator for KktOperator {
    fn dim(&self) -> usize {
        match &self.inner {
            OperatorKind::Dense(d) => d.dim(),
            OperatorKind::Callback(c) => c.dim(),
        }
    }
    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        match &self.inner {
            OperatorKind::Dense(d) => d.matvec(x, y),
            OperatorKind::Callback(c) => c.matvec(x, y),
        }
    }
}

/// Opaque experiment: a resolved config ready to run.
pub struct KktExperiment {
    config: ExperimentConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(KktStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::DimensionMismatch { .. } => KktStatus::DimensionMismatch,
            Error::Config(_) => KktStatus::Config,
            Error::Io(_) | Error::Checkpoint { .. } => KktStatus::Io,
            Error::NonFinite(_) | Error::SolverFailure { .. } => KktStatus::Numerical,
            _ => KktStatus::InvalidArgument,
        };
        Failure(code, e.to_string())
    }
}

impl From<CliError> for Failure {
    fn from(e: CliError) -> Self {
        match e {
            CliError::Config(m) => Failure(KktStatus::Config, m),
            CliError::Numerical(m) => Failure(KktStatus::Numerical, m),
            CliError::Run(inner) => inner.into(),
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(KktStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status code plus the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> KktStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KktStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_last_error(msg);
            code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("panic: {msg}"));
            KktStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or point to `n` readable doubles.
unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Failure(KktStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failure on this thread, or null if there was none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn kktrain_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kktrain_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn kktrain_solver_config_default() -> KktSolverConfig {
    SolverConfig::default().into()
}

/// Wraps a row-major `n x n` matrix (copied). The matrix should be symmetric.
///
/// # Safety
/// `data` must point to `n * n` readable doubles and `out` to a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn kktrain_operator_dense(n: usize, data: *const f64, out: *mut *mut KktOperator) -> KktStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = n.checked_mul(n).ok_or_else(|| Failure(KktStatus::InvalidArgument, "n * n overflows".into()))?;
        let values = slice(data, len, "data")?.to_vec();
        let op = DenseOperator::new(DenseMatrix::from_row_major(n, n, values)?)?;
        *out = Box::into_raw(Box::new(KktOperator { inner: OperatorKind::Dense(op) }));
        Ok(())
    })
}

/// Wraps a matrix-free operator. `user` is passed back to every call and is
/// not owned by the handle.
///
/// # Safety
/// `matvec` must write `n` doubles to `y` and stay valid, together with
/// `user`, until the handle is freed.
#[no_mangle]
pub unsafe extern "C" fn kktrain_operator_callback(
    n: usize,
    matvec: KktMatvecFn,
    user: *mut c_void,
    out: *mut *mut KktOperator,
) -> KktStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let f = matvec.ok_or_else(|| null("matvec"))?;
        if n == 0 {
            return Err(Error::Empty("operator").into());
        }
        let op = CallbackOperator { n, f, user };
        *out = Box::into_raw(Box::new(KktOperator { inner: OperatorKind::Callback(op) }));
        Ok(())
    })
}

/// Dimension of the operator, or 0 for a null handle.
///
/// # Safety
/// `op` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kktrain_operator_dim(op: *const KktOperator) -> usize {
    op.as_ref().map_or(0, |o| o.dim())
}

/// Writes `B x` into `y`.
///
/// # Safety
/// `op` must be a live handle; `x` and `y` must hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn kktrain_operator_apply(op: *const KktOperator, x: *const f64, y: *mut f64) -> KktStatus {
    guard(|| {
        let op = op.as_ref().ok_or_else(|| null("op"))?;
        let n = op.dim();
        let x = slice(x, n, "x")?;
        if y.is_null() {
            return Err(null("y"));
        }
        op.matvec(x, std::slice::from_raw_parts_mut(y, n));
        Ok(())
    })
}

/// # Safety
/// `op` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kktrain_operator_free(op: *mut KktOperator) {
    if !op.is_null() {
        drop(Box::from_raw(op));
    }
}

#[derive(Clone, Copy)]
enum Method {
    Minres,
    MinresQlp,
}

unsafe fn solve_with(
    method: Method,
    op: &dyn LinearOperator,
    b: *const f64,
    config: *const KktSolverConfig,
    x: *mut f64,
    info: *mut KktSolveInfo,
) -> Result<(), Failure> {
    let n = op.dim();
    let b = Vector::from_slice(slice(b, n, "b")?)?;
    if x.is_null() {
        return Err(null("x"));
    }
    let cfg: SolverConfig = config.as_ref().map_or_else(SolverConfig::default, |c| (*c).into());
    let sol = match method {
        Method::Minres => minres(op, &b, &cfg)?,
        Method::MinresQlp => minres_qlp(op, &b, &cfg)?,
    };
    std::slice::from_raw_parts_mut(x, n).copy_from_slice(sol.x.as_slice());
    if let Some(info) = info.as_mut() {
        *info = (&sol).into();
    }
    Ok(())
}

/// Minimum-length (least-squares) solution of `B x = b` by MINRES-QLP.
/// `config` may be null for defaults; `info` may be null.
///
/// # Safety
/// `op` must be a live handle; `b` and `x` must hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn kktrain_minres_qlp(
    op: *const KktOperator,
    b: *const f64,
    config: *const KktSolverConfig,
    x: *mut f64,
    info: *mut KktSolveInfo,
) -> KktStatus {
    guard(|| solve_with(Method::MinresQlp, op.as_ref().ok_or_else(|| null("op"))?, b, config, x, info))
}

/// Plain MINRES on the same operator handle.
///
/// # Safety
/// As for [`kktrain_minres_qlp`].
#[no_mangle]
pub unsafe extern "C" fn kktrain_minres(
    op: *const KktOperator,
    b: *const f64,
    config: *const KktSolverConfig,
    x: *mut f64,
    info: *mut KktSolveInfo,
) -> KktStatus {
    guard(|| solve_with(Method::Minres, op.as_ref().ok_or_else(|| null("op"))?, b, config, x, info))
}

/// One-shot MINRES-QLP on a row-major dense matrix, without a handle.
///
/// # Safety
/// `a` must hold `n * n` doubles; `b` and `x` must hold `n`.
#[no_mangle]
pub unsafe extern "C" fn kktrain_minres_qlp_dense(
    n: usize,
    a: *const f64,
    b: *const f64,
    config: *const KktSolverConfig,
    x: *mut f64,
    info: *mut KktSolveInfo,
) -> KktStatus {
    guard(|| {
        let len = n.checked_mul(n).ok_or_else(|| Failure(KktStatus::InvalidArgument, "n * n overflows".into()))?;
        let op = DenseOperator::new(DenseMatrix::from_row_major(n, n, slice(a, len, "a")?.to_vec())?)?;
        solve_with(Method::MinresQlp, &op, b, config, x, info)
    })
}

/// Loads an experiment TOML. `seed` overrides the file's seed when
/// `override_seed` is true; `out_dir` may be null to keep the file's (or
/// the default) output directory.
///
/// # Safety
/// `path` and a non-null `out_dir` must be NUL-terminated strings; `out`
/// must be a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn kktrain_experiment_load(
    path: *const c_char,
    override_seed: bool,
    seed: u64,
    out_dir: *const c_char,
    out: *mut *mut KktExperiment,
) -> KktStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let opts = RunOptions {
            config: path_arg(path, "path")?,
            seed: override_seed.then_some(seed),
            out_dir: if out_dir.is_null() { None } else { Some(path_arg(out_dir, "out_dir")?) },
            full_scale: false,
        };
        let config = load_config(&opts)?;
        *out = Box::into_raw(Box::new(KktExperiment { config }));
        Ok(())
    })
}

/// Seed the loaded experiment will run with, or 0 for a null handle.
///
/// # Safety
/// `exp` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kktrain_experiment_seed(exp: *const KktExperiment) -> u64 {
    exp.as_ref().map_or(0, |e| e.config.seed)
}

/// Runs the experiment, writing its outputs. On success `summary_json`
/// (if non-null) receives a JSON summary to release with [`kktrain_string_free`].
/// A diverged run returns [`KktStatus::Numerical`] after its outputs are written.
///
/// # Safety
/// `exp` must be a live handle; `summary_json` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn kktrain_experiment_run(exp: *const KktExperiment, summary_json: *mut *mut c_char) -> KktStatus {
    guard(|| {
        let exp = exp.as_ref().ok_or_else(|| null("exp"))?;
        let summary = run_experiment(&exp.config)?;
        if let Some(slot) = summary_json.as_mut() {
            let json = serde_json::to_string(&summary).map_err(|e| Failure(KktStatus::Io, e.to_string()))?;
            *slot = CString::new(json).map_err(|e| Failure(KktStatus::Io, e.to_string()))?.into_raw();
        }
        Ok(())
    })
}

/// # Safety
/// `exp` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kktrain_experiment_free(exp: *mut KktExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kktrain_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
