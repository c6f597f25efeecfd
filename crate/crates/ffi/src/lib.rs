//! C ABI over `lissa-core`.
//!
//! Objects cross the boundary as opaque handles created by `lissa_*_new`
//! functions and released by the matching `lissa_*_free`. Every fallible
//! call returns a [`LissaStatus`]; on failure [`lissa_last_error`] holds a
//! message for the calling thread. Matrices are row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use lissa_core::error::Error;
use lissa_core::gnh::{BatchSource, GnhOperator, HvpMode};
use lissa_core::linalg::{DenseMatrix, DenseVector};
use lissa_core::lissa::{exact_ihvp, lissa_solve as core_lissa_solve, LissaConfig};
use lissa_core::models::{Activation, Dataset, Example, Layout, ModelSpec};
use lissa_core::operator::{DenseOperator, StochasticHvp};
use lissa_core::rng::SeededRng;
use lissa_core::spectral::{
    estimate_trace, recommend_hyperparams, sketch_operator, top_eigenvalue_from_sketch, SketchConfig,
    SpectralStats,
};
use lissa_core::stats::MeanSe;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LissaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Divergence = 4,
    NonFinite = 5,
    Singular = 6,
    Panic = 7,
    Internal = 8,
}

/// Recommended LiSSA settings. `t_steps` is meaningful only when
/// `has_t_steps` is true (it is false at zero damping).
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct LissaHyperParams {
    pub eta: f64,
    pub batch_size: usize,
    pub t_steps: usize,
    pub has_t_steps: bool,
}

/// Labelled examples for a GNH operator.
pub struct LissaDataset {
    inner: Arc<Dataset>,
}

/// Symmetric PSD operator: an explicit matrix or an implicit model GNH.
pub struct LissaOperator {
    inner: OperatorKind,
}

enum OperatorKind {
    Dense(DenseOperator),
    Gnh(GnhOperator),
}

impl LissaOperator {
    fn hvp(&self) -> &dyn StochasticHvp {
        match &self.inner {
            OperatorKind::Dense(d) => d,
            OperatorKind::Gnh(g) => g,
        }
    }

    fn layout(&self) -> Layout {
        match &self.inner {
            OperatorKind::Dense(d) => Layout::flat(d.dim()),
            OperatorKind::Gnh(g) => g.spec.layout(),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LissaStatus {
    match e {
        Error::DimensionMismatch { .. } | Error::EmptyDimension(_) => LissaStatus::DimensionMismatch,
        Error::InvalidArgument(_) | Error::Contract(_) | Error::Config(_) => LissaStatus::InvalidArgument,
        Error::Divergence { .. } => LissaStatus::Divergence,
        Error::NonFinite(_) => LissaStatus::NonFinite,
        Error::Singular(_) | Error::ZeroVariance(_) => LissaStatus::Singular,
        _ => LissaStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Error>) -> LissaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LissaStatus::Ok,
        Ok(Err(e)) => {
            let s = status_of(&e);
            set_last_error(e.to_string());
            s
        }
        Err(_) => {
            set_last_error("panic inside lissa-core".into());
            LissaStatus::Panic
        }
    }
}

fn null(what: &str) -> Error {
    Error::InvalidArgument(format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Error> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Error> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn operator<'a>(op: *const LissaOperator) -> Result<&'a LissaOperator, Error> {
    op.as_ref().ok_or_else(|| null("operator"))
}

fn status_for_null(ptrs: &[bool]) -> Option<LissaStatus> {
    if ptrs.iter().any(|&is_null| is_null) {
        set_last_error("required pointer argument is null".into());
        Some(LissaStatus::NullPointer)
    } else {
        None
    }
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lissa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Static, NUL-terminated library version.
#[no_mangle]
pub extern "C" fn lissa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies `n` examples with `dim` features (row-major `x`) and labels `y`.
///
/// # Safety
/// `x` must point to `n * dim` doubles, `y` to `n` labels, `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn lissa_dataset_new(
    x: *const f64,
    y: *const usize,
    n: usize,
    dim: usize,
    n_classes: usize,
    out: *mut *mut LissaDataset,
) -> LissaStatus {
    if let Some(s) = status_for_null(&[out.is_null()]) {
        return s;
    }
    guard(|| {
        let x = slice(x, n * dim, "x")?;
        let y = slice(y, n, "y")?;
        let examples = (0..n)
            .map(|i| Example::new(x[i * dim..(i + 1) * dim].to_vec(), y[i]))
            .collect();
        let ds = Dataset::new(examples, n_classes)?;
        *out = Box::into_raw(Box::new(LissaDataset { inner: Arc::new(ds) }));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from [`lissa_dataset_new`] and not be freed twice. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn lissa_dataset_free(ds: *mut LissaDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Operator backed by a symmetric `n × n` row-major matrix.
///
/// # Safety
/// `matrix` must point to `n * n` doubles and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn lissa_operator_dense(matrix: *const f64, n: usize, out: *mut *mut LissaOperator) -> LissaStatus {
    if let Some(s) = status_for_null(&[out.is_null()]) {
        return s;
    }
    guard(|| {
        let m = slice(matrix, n * n, "matrix")?;
        let op = DenseOperator::new(DenseMatrix::from_row_slice(n, n, m))?;
        *out = Box::into_raw(Box::new(LissaOperator {
            inner: OperatorKind::Dense(op),
        }));
        Ok(())
    })
}

/// GNH of an MLP (`n_layers` widths, input first, classes last; two widths
/// give a softmax-linear model) at parameters `theta`.
///
/// `activation`: 0 = tanh, 1 = relu. `batch_size` 0 uses the full dataset
/// on every product. `fd_delta` 0 uses exact Jacobian-vector products,
/// otherwise central differences with that step.
///
/// # Safety
/// `layers` must point to `n_layers` widths, `theta` to `n_theta` doubles,
/// `data` to a live dataset handle, `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn lissa_operator_gnh(
    layers: *const usize,
    n_layers: usize,
    activation: u32,
    theta: *const f64,
    n_theta: usize,
    data: *const LissaDataset,
    batch_size: usize,
    fd_delta: f64,
    out: *mut *mut LissaOperator,
) -> LissaStatus {
    if let Some(s) = status_for_null(&[out.is_null(), data.is_null()]) {
        return s;
    }
    guard(|| {
        let layers = slice(layers, n_layers, "layers")?.to_vec();
        let activation = match activation {
            0 => Activation::Tanh,
            1 => Activation::Relu,
            a => return Err(Error::InvalidArgument(format!("unknown activation code {a}"))),
        };
        let spec = if layers.len() == 2 {
            ModelSpec::softmax_linear(layers[0], layers[1])?
        } else {
            ModelSpec::mlp(layers, activation)?
        };
        let values = DenseVector::from_column_slice(slice(theta, n_theta, "theta")?);
        let theta = spec.zeros().with_values(values)?;
        let source = if batch_size == 0 {
            BatchSource::Full
        } else {
            BatchSource::Sampled { batch_size }
        };
        let mode = if fd_delta == 0.0 {
            HvpMode::Exact
        } else {
            HvpMode::Fd { delta: fd_delta }
        };
        let op = GnhOperator::new(spec, theta, (*data).inner.clone(), source, mode)?;
        *out = Box::into_raw(Box::new(LissaOperator {
            inner: OperatorKind::Gnh(op),
        }));
        Ok(())
    })
}

/// Dimension of the operator, or 0 for NULL.
///
/// # Safety
/// `op` must be NULL or a live operator handle.
#[no_mangle]
pub unsafe extern "C" fn lissa_operator_dim(op: *const LissaOperator) -> usize {
    op.as_ref().map_or(0, |o| o.hvp().dim())
}

/// # Safety
/// `op` must come from a `lissa_operator_*` constructor and not be freed twice. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn lissa_operator_free(op: *mut LissaOperator) {
    if !op.is_null() {
        drop(Box::from_raw(op));
    }
}

/// One operator application `out = H̃ u` (a fresh batch draw for sampled GNH).
///
/// # Safety
/// `u` and `out` must point to `n` doubles, `n` equal to the operator dimension.
#[no_mangle]
pub unsafe extern "C" fn lissa_operator_apply(
    op: *const LissaOperator,
    u: *const f64,
    n: usize,
    seed: u64,
    out: *mut f64,
) -> LissaStatus {
    guard(|| {
        let op = operator(op)?;
        let u = DenseVector::from_column_slice(slice(u, n, "u")?);
        let hu = op.hvp().hvp(&u, &mut SeededRng::new(seed))?;
        slice_mut(out, n, "out")?.copy_from_slice(hu.as_slice());
        Ok(())
    })
}

/// Hutchinson estimate of `Tr(H)/N` with its standard error.
///
/// # Safety
/// `op` must be a live handle; `mean` and `se` writable.
#[no_mangle]
pub unsafe extern "C" fn lissa_estimate_trace(
    op: *const LissaOperator,
    n_probes: usize,
    seed: u64,
    mean: *mut f64,
    se: *mut f64,
) -> LissaStatus {
    if let Some(s) = status_for_null(&[mean.is_null(), se.is_null()]) {
        return s;
    }
    guard(|| {
        let t = estimate_trace(operator(op)?.hvp(), n_probes, &mut SeededRng::for_component(seed, "trace"))?;
        *mean = t.mean;
        *se = t.se;
        Ok(())
    })
}

/// Top eigenvalue from a `d`-dimensional Gaussian sketch.
///
/// # Safety
/// `op` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lissa_top_eigenvalue(op: *const LissaOperator, d: usize, seed: u64, out: *mut f64) -> LissaStatus {
    if let Some(s) = status_for_null(&[out.is_null()]) {
        return s;
    }
    guard(|| {
        let op = operator(op)?;
        let sketch = sketch_operator(op.hvp(), &op.layout(), &SketchConfig::new(d, seed))?;
        *out = top_eigenvalue_from_sketch(&sketch)?;
        Ok(())
    })
}

/// LiSSA settings from `Tr(H)/N`, `N`, `λ_max` and damping `λ`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lissa_recommend(
    trace_per_param: f64,
    n_params: usize,
    lambda_max: f64,
    lambda_damp: f64,
    c: f64,
    t_multiplier: f64,
    out: *mut LissaHyperParams,
) -> LissaStatus {
    if let Some(s) = status_for_null(&[out.is_null()]) {
        return s;
    }
    guard(|| {
        let stats = SpectralStats {
            trace_per_param: MeanSe {
                mean: trace_per_param,
                se: 0.0,
                n: 0,
            },
            frobenius_sq_per_param: None,
            lambda_max,
            n_params,
        };
        let hp = recommend_hyperparams(&stats, lambda_damp, c, t_multiplier)?;
        *out = LissaHyperParams {
            eta: hp.eta,
            batch_size: hp.batch_size_min,
            t_steps: hp.t_steps.unwrap_or(0),
            has_t_steps: hp.t_steps.is_some(),
        };
        Ok(())
    })
}

/// Runs `t_steps` LiSSA iterations from zero for `(H + λ) u = g`.
///
/// # Safety
/// `g` and `u_out` must point to `n` doubles, `n` equal to the operator dimension.
#[no_mangle]
pub unsafe extern "C" fn lissa_solve(
    op: *const LissaOperator,
    g: *const f64,
    n: usize,
    eta: f64,
    lambda_damp: f64,
    t_steps: usize,
    seed: u64,
    u_out: *mut f64,
) -> LissaStatus {
    guard(|| {
        let op = operator(op)?;
        let g = DenseVector::from_column_slice(slice(g, n, "g")?);
        let cfg = LissaConfig::new(eta, lambda_damp, t_steps, seed);
        let (u, _) = core_lissa_solve(op.hvp(), &g, &cfg)?;
        slice_mut(u_out, n, "u_out")?.copy_from_slice(u.as_slice());
        Ok(())
    })
}

/// Dense solve of `(H + λ) u = g` for an `n × n` row-major `h`.
///
/// # Safety
/// `h` must point to `n * n` doubles; `g` and `u_out` to `n`.
#[no_mangle]
pub unsafe extern "C" fn lissa_exact_ihvp(
    h: *const f64,
    n: usize,
    lambda_damp: f64,
    g: *const f64,
    u_out: *mut f64,
) -> LissaStatus {
    guard(|| {
        let h = DenseMatrix::from_row_slice(n, n, slice(h, n * n, "h")?);
        let g = DenseVector::from_column_slice(slice(g, n, "g")?);
        let u = exact_ihvp(&h, lambda_damp, &g)?;
        slice_mut(u_out, n, "u_out")?.copy_from_slice(u.as_slice());
        Ok(())
    })
}
