//! Gauss–Newton Hessian `H = (1/|D|) Σ J S Jᵀ` of the cross-entropy loss.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pairwise_sum, DenseMatrix, DenseVector};
use crate::models::{net, softmax, Dataset, Example, JvpMode, ModelSpec, ParamVector, DEFAULT_FD_DELTA};
use crate::operator::{check_dim, StochasticHvp};
use crate::rng::SeededRng;

/// Largest parameter count for which the dense GNH is materialised.
pub const ORACLE_MAX_PARAMS: usize = 2000;

/// `S = Diag(sf(h)) − sf(h) sf(h)ᵀ`, the logit Hessian of the cross-entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxHessian {
    pub s: DenseMatrix,
}

pub fn softmax_hessian(h: &DenseVector) -> Result<SoftmaxHessian> {
    if h.is_empty() {
        return Err(Error::EmptyDimension("logits"));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let p = softmax(h.as_slice());
    let mut s = -(&p * p.transpose());
    for i in 0..p.len() {
        s[(i, i)] += p[i];
    }
    Ok(SoftmaxHessian { s })
}

/// `S v` without forming `S`.
#[inline]
fn apply_softmax_hessian(p: &DenseVector, v: &DenseVector) -> DenseVector {
    let pv = p.dot(v);
    p.component_mul(v) - p * pv
}

/// Examples drawn for one HVP evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub examples: Vec<Example>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn full(data: &Dataset) -> Self {
        Self {
            ids: data.ids().to_vec(),
            examples: data.examples().to_vec(),
        }
    }
}

/// I.i.d. uniform draws with replacement.
pub fn sample_batch(data: &Dataset, size: usize, rng: &mut SeededRng) -> Result<Batch> {
    if data.is_empty() {
        return Err(Error::EmptyDimension("dataset"));
    }
    if size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut ids = Vec::with_capacity(size);
    let mut examples = Vec::with_capacity(size);
    for _ in 0..size {
        let i = rng.below(data.len());
        ids.push(data.ids()[i]);
        examples.push(data.get(i).clone());
    }
    Ok(Batch { ids, examples })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum BatchSource {
    /// Deterministic pass over the whole dataset.
    Full,
    /// Fresh i.i.d. batch on every evaluation.
    Sampled { batch_size: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum HvpMode {
    /// Forward-mode JVP, then backprop.
    Exact,
    /// Central-difference JVP (two extra forwards), then backprop.
    Fd { delta: f64 },
}

impl Default for HvpMode {
    fn default() -> Self {
        HvpMode::Fd {
            delta: DEFAULT_FD_DELTA,
        }
    }
}

impl HvpMode {
    fn jvp_mode(self) -> JvpMode {
        match self {
            HvpMode::Exact => JvpMode::Exact,
            HvpMode::Fd { delta } => JvpMode::FiniteDiff { delta },
        }
    }
}

/// Implicit GNH of a model on a dataset.
#[derive(Clone, Debug)]
pub struct GnhOperator {
    pub spec: ModelSpec,
    pub theta: ParamVector,
    pub data: Arc<Dataset>,
    pub source: BatchSource,
    pub mode: HvpMode,
}

impl GnhOperator {
    pub fn new(
        spec: ModelSpec,
        theta: ParamVector,
        data: Arc<Dataset>,
        source: BatchSource,
        mode: HvpMode,
    ) -> Result<Self> {
        spec.validate()?;
        if theta.len() != spec.n_params() {
            return Err(Error::mismatch("GNH parameters", spec.n_params(), theta.len()));
        }
        if data.dim() != spec.input_dim() {
            return Err(Error::mismatch("GNH dataset features", spec.input_dim(), data.dim()));
        }
        if data.n_classes() > spec.n_classes() {
            return Err(Error::invalid("dataset has more classes than the model"));
        }
        if let BatchSource::Sampled { batch_size: 0 } = source {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if let HvpMode::Fd { delta } = mode {
            if !(delta > 0.0) {
                return Err(Error::invalid(format!("finite-difference step must be > 0, got {delta}")));
            }
        }
        Ok(Self {
            spec,
            theta,
            data,
            source,
            mode,
        })
    }

    pub fn with_source(&self, source: BatchSource) -> Self {
        Self {
            source,
            ..self.clone()
        }
    }

    pub fn with_mode(&self, mode: HvpMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    /// The same model and data evaluated on the full dataset.
    pub fn full(&self) -> Self {
        self.with_source(BatchSource::Full)
    }

    /// True when `δ‖u‖ > 1`, where central differences leave the smooth regime.
    pub fn fd_step_too_large(&self, u: &DenseVector) -> bool {
        matches!(self.mode, HvpMode::Fd { delta } if delta * u.norm() > 1.0)
    }

    /// `J S Jᵀ u` for a single example.
    fn example_hvp(&self, x: &[f64], u: &[f64]) -> Result<DenseVector> {
        let theta = self.theta.as_slice();
        let cache = net::forward(&self.spec, theta, x);
        let p = softmax(cache.logits());
        let jvp = crate::models::logit_jvp_unchecked(&self.spec, theta, x, u, self.mode.jvp_mode())?;
        let w = apply_softmax_hessian(&p, &jvp);
        Ok(net::backward(&self.spec, theta, &cache, w.as_slice()))
    }

    /// `(1/|B|) Σ_{x∈B} J S Jᵀ u`, summed pairwise in batch order.
    pub fn hvp_on_batch(&self, examples: &[Example], u: &DenseVector) -> Result<DenseVector> {
        check_dim(self.theta.len(), u)?;
        if examples.is_empty() {
            return Err(Error::EmptyDimension("batch"));
        }
        let n = examples.len();
        let terms: Vec<DenseVector> = examples
            .iter()
            .map(|e| self.example_hvp(e.x.as_slice(), u.as_slice()))
            .collect::<Result<_>>()?;
        let sum = pairwise_sum(n, u.len(), &|i| terms[i].clone());
        Ok(sum / n as f64)
    }

    pub fn hvp_full(&self, u: &DenseVector) -> Result<DenseVector> {
        self.hvp_on_batch(self.data.examples(), u)
    }
}

impl StochasticHvp for GnhOperator {
    fn dim(&self) -> usize {
        self.theta.len()
    }

    fn hvp(&self, u: &DenseVector, rng: &mut SeededRng) -> Result<DenseVector> {
        match self.source {
            BatchSource::Full => self.hvp_full(u),
            BatchSource::Sampled { batch_size } => {
                let batch = sample_batch(&self.data, batch_size, rng)?;
                self.hvp_on_batch(&batch.examples, u)
            }
        }
    }

    fn is_deterministic(&self) -> bool {
        self.source == BatchSource::Full
    }
}

/// Logit Jacobian `J` (N × K): column `k` is `∇_θ h_k(x; θ)`.
pub fn logit_jacobian(spec: &ModelSpec, theta: &ParamVector, x: &DenseVector) -> Result<DenseMatrix> {
    if theta.len() != spec.n_params() {
        return Err(Error::mismatch("Jacobian parameters", spec.n_params(), theta.len()));
    }
    if x.len() != spec.input_dim() {
        return Err(Error::mismatch("Jacobian input", spec.input_dim(), x.len()));
    }
    let k = spec.n_classes();
    let cache = net::forward(spec, theta.as_slice(), x.as_slice());
    let mut j = DenseMatrix::zeros(spec.n_params(), k);
    let mut e = vec![0.0; k];
    for c in 0..k {
        e.fill(0.0);
        e[c] = 1.0;
        j.set_column(c, &net::backward(spec, theta.as_slice(), &cache, &e));
    }
    Ok(j)
}

/// Dense `H = (1/|D|) Σ J S Jᵀ` from exact per-example Jacobians.
///
/// Each example contributes `Σ_k p_k (j_k − Jp)(j_k − Jp)ᵀ`, which equals
/// `J S Jᵀ`; these columns are stacked and multiplied in chunks.
pub fn gnh_matrix_exact(spec: &ModelSpec, theta: &ParamVector, data: &Dataset) -> Result<DenseMatrix> {
    let n_params = spec.n_params();
    if n_params > ORACLE_MAX_PARAMS {
        return Err(Error::OracleTooLarge {
            n: n_params,
            limit: ORACLE_MAX_PARAMS,
        });
    }
    let k = spec.n_classes();
    const CHUNK: usize = 128;
    let mut h = DenseMatrix::zeros(n_params, n_params);
    for chunk in data.examples().chunks(CHUNK) {
        let mut c = DenseMatrix::zeros(n_params, chunk.len() * k);
        for (b, ex) in chunk.iter().enumerate() {
            let j = logit_jacobian(spec, theta, &ex.x)?;
            let out = net::forward(spec, theta.as_slice(), ex.x.as_slice());
            let p = softmax(out.logits());
            let mean = &j * &p;
            for kk in 0..k {
                let col = (j.column(kk) - &mean) * p[kk].sqrt();
                c.set_column(b * k + kk, &col);
            }
        }
        h.gemm(1.0, &c, &c.transpose(), 1.0);
    }
    h /= data.len() as f64;
    Ok(crate::linalg::symmetrize(&h))
}
