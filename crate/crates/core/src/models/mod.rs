//! Desk-scale classifiers: logits, cross-entropy gradients and logit JVPs.

pub mod data;
pub mod io;
pub mod net;
pub mod spec;
pub mod train;

pub use data::{Dataset, Example, SyntheticSpec};
pub use spec::{Activation, Layout, ModelKind, ModelSpec, ParamVector, Segment};

use crate::error::{Error, Result};
use crate::linalg::DenseVector;

/// Default finite-difference step for logit JVPs.
pub const DEFAULT_FD_DELTA: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct LogitOutput {
    pub h: DenseVector,
    pub softmax: DenseVector,
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(h: &[f64]) -> DenseVector {
    let m = h.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = h.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    DenseVector::from_iterator(h.len(), e.into_iter().map(|v| v / s))
}

/// `log Σ exp(h_j)`.
pub fn log_sum_exp(h: &[f64]) -> f64 {
    let m = h.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + h.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Cross-entropy `−log sf(h)_y`.
pub fn cross_entropy(h: &[f64], y: usize) -> f64 {
    log_sum_exp(h) - h[y]
}

fn check_theta(spec: &ModelSpec, theta: &[f64]) -> Result<()> {
    if theta.len() != spec.n_params() {
        return Err(Error::mismatch("parameter vector", spec.n_params(), theta.len()));
    }
    Ok(())
}

fn check_input(spec: &ModelSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.input_dim() {
        return Err(Error::mismatch("input features", spec.input_dim(), x.len()));
    }
    Ok(())
}

fn check_example(spec: &ModelSpec, ex: &Example) -> Result<()> {
    check_input(spec, ex.x.as_slice())?;
    if ex.y >= spec.n_classes() {
        return Err(Error::invalid(format!(
            "label {} outside 0..{}",
            ex.y,
            spec.n_classes()
        )));
    }
    Ok(())
}

pub fn forward_logits(spec: &ModelSpec, theta: &ParamVector, x: &DenseVector) -> Result<LogitOutput> {
    check_theta(spec, theta.as_slice())?;
    check_input(spec, x.as_slice())?;
    let cache = net::forward(spec, theta.as_slice(), x.as_slice());
    let h = cache.logits();
    Ok(LogitOutput {
        softmax: softmax(h),
        h: DenseVector::from_column_slice(h),
    })
}

pub fn loss_value(spec: &ModelSpec, theta: &ParamVector, ex: &Example) -> Result<f64> {
    check_theta(spec, theta.as_slice())?;
    check_example(spec, ex)?;
    let cache = net::forward(spec, theta.as_slice(), ex.x.as_slice());
    Ok(cross_entropy(cache.logits(), ex.y))
}

/// Gradient of the cross-entropy loss: backprop of `sf(h) − e_y`.
pub fn loss_gradient(spec: &ModelSpec, theta: &ParamVector, ex: &Example) -> Result<ParamVector> {
    check_theta(spec, theta.as_slice())?;
    check_example(spec, ex)?;
    let cache = net::forward(spec, theta.as_slice(), ex.x.as_slice());
    let mut w = softmax(cache.logits());
    w[ex.y] -= 1.0;
    let g = net::backward(spec, theta.as_slice(), &cache, w.as_slice());
    theta.with_values(g)
}

/// Gradient of `log p(y | x; θ)`, the negated loss gradient.
pub fn test_gradient(spec: &ModelSpec, theta: &ParamVector, ex: &Example) -> Result<ParamVector> {
    let mut g = loss_gradient(spec, theta, ex)?;
    g.values.neg_mut();
    Ok(g)
}

/// How `J_θ h(x; θ)ᵀ u` is computed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JvpMode {
    /// Forward-mode dual propagation.
    Exact,
    /// Central difference `(h(θ + δu) − h(θ − δu)) / 2δ`.
    FiniteDiff { delta: f64 },
}

impl Default for JvpMode {
    fn default() -> Self {
        JvpMode::FiniteDiff {
            delta: DEFAULT_FD_DELTA,
        }
    }
}

pub fn logit_jvp(
    spec: &ModelSpec,
    theta: &ParamVector,
    x: &DenseVector,
    u: &DenseVector,
    mode: JvpMode,
) -> Result<DenseVector> {
    check_theta(spec, theta.as_slice())?;
    check_input(spec, x.as_slice())?;
    if u.len() != theta.len() {
        return Err(Error::mismatch("JVP direction", theta.len(), u.len()));
    }
    logit_jvp_unchecked(spec, theta.as_slice(), x.as_slice(), u.as_slice(), mode)
}

pub(crate) fn logit_jvp_unchecked(
    spec: &ModelSpec,
    theta: &[f64],
    x: &[f64],
    u: &[f64],
    mode: JvpMode,
) -> Result<DenseVector> {
    match mode {
        JvpMode::Exact => {
            let (_, hd) = net::forward_tangent(spec, theta, x, u);
            Ok(DenseVector::from_vec(hd))
        }
        JvpMode::FiniteDiff { delta } => {
            if !(delta > 0.0) || !delta.is_finite() {
                return Err(Error::invalid(format!("finite-difference step must be > 0, got {delta}")));
            }
            let plus: Vec<f64> = theta.iter().zip(u).map(|(t, d)| t + delta * d).collect();
            let minus: Vec<f64> = theta.iter().zip(u).map(|(t, d)| t - delta * d).collect();
            let hp = net::forward(spec, &plus, x);
            let hm = net::forward(spec, &minus, x);
            let k = spec.n_classes();
            Ok(DenseVector::from_iterator(
                k,
                hp.logits()
                    .iter()
                    .zip(hm.logits())
                    .map(|(a, b)| (a - b) / (2.0 * delta)),
            ))
        }
    }
}

/// Mean cross-entropy over a dataset.
pub fn dataset_loss(spec: &ModelSpec, theta: &ParamVector, data: &Dataset) -> Result<f64> {
    let losses = data
        .examples()
        .iter()
        .map(|e| loss_value(spec, theta, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(crate::linalg::pairwise_sum_scalars(&losses) / data.len() as f64)
}

/// Mean loss gradient over a dataset.
pub fn dataset_gradient(spec: &ModelSpec, theta: &ParamVector, data: &Dataset) -> Result<ParamVector> {
    check_theta(spec, theta.as_slice())?;
    for e in data.examples() {
        check_example(spec, e)?;
    }
    let n = data.len();
    let sum = crate::linalg::pairwise_sum(n, theta.len(), &|i| {
        loss_gradient(spec, theta, data.get(i))
            .expect("validated example")
            .into_inner()
    });
    theta.with_values(sum / n as f64)
}

/// Predicted class `argmax h`.
pub fn predict(spec: &ModelSpec, theta: &ParamVector, x: &DenseVector) -> Result<usize> {
    let out = forward_logits(spec, theta, x)?;
    Ok(out.h.argmax().0)
}
