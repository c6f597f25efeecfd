//! Randomised spectral statistics of an implicit operator: Hutchinson trace
//! and Frobenius estimates, Gaussian sketches for the top eigenvalues, the
//! hyperparameter recommendation built on them and an empirical check of the
//! second-moment condition `E H̃² − H² ⪯ (C/|B|) Tr(H) H`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnh::{BatchSource, GnhOperator};
use crate::linalg::{symmetrize, sym_eig, DenseMatrix, DenseVector};
use crate::models::Layout;
use crate::operator::StochasticHvp;
use crate::rng::SeededRng;
use crate::stats::MeanSe;

/// Default constant in the batch-size condition.
pub const DEFAULT_C: f64 = 2.0;
/// Default `T = t_multiplier / (λη)`.
pub const DEFAULT_T_MULTIPLIER: f64 = 2.0;

fn check_probes(n_probes: usize) -> Result<()> {
    if n_probes < 2 {
        return Err(Error::invalid(format!("need at least 2 probes, got {n_probes}")));
    }
    Ok(())
}

/// Hutchinson estimate of `Tr(H)/N`: mean of `gᵀH̃g` over probes
/// `g ~ N(0, I/N)`, each with its own operator draw.
///
/// Probe `i` uses substream `i` of a stream forked from `rng`, so the result
/// does not depend on thread scheduling.
pub fn estimate_trace<O: StochasticHvp + ?Sized>(op: &O, n_probes: usize, rng: &mut SeededRng) -> Result<MeanSe> {
    check_probes(n_probes)?;
    let n = op.dim();
    let base = rng.fork();
    let samples: Vec<f64> = (0..n_probes)
        .into_par_iter()
        .map(|i| {
            let mut r = base.substream(i as u64);
            let g = r.gaussian_vector(n, 1.0 / n as f64)?;
            Ok(g.dot(&op.hvp(&g, &mut r)?))
        })
        .collect::<Result<_>>()?;
    MeanSe::from_samples(&samples)
}

/// Estimate of `Tr(H²)/N` as the mean of `(H̃g)ᵀ(Ĥg)` with two independent
/// operator draws per probe.
pub fn estimate_frobenius<O: StochasticHvp + ?Sized>(op: &O, n_probes: usize, rng: &mut SeededRng) -> Result<MeanSe> {
    check_probes(n_probes)?;
    let n = op.dim();
    let base = rng.fork();
    let samples: Vec<f64> = (0..n_probes)
        .into_par_iter()
        .map(|i| {
            let mut r = base.substream(i as u64);
            let g = r.gaussian_vector(n, 1.0 / n as f64)?;
            let a = op.hvp(&g, &mut r)?;
            let b = op.hvp(&g, &mut r)?;
            Ok(a.dot(&b))
        })
        .collect::<Result<_>>()?;
    MeanSe::from_samples(&samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SketchLayout {
    /// One dense `d × N` embedding.
    Summed,
    /// Independent `d × N_l` embedding per layer, stacked block-diagonally.
    Concatenated,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchConfig {
    pub d: usize,
    pub seed: u64,
    pub layout: SketchLayout,
    /// Operator draws averaged per sketch column.
    pub hvp_batches: usize,
}

impl SketchConfig {
    pub fn new(d: usize, seed: u64) -> Self {
        Self {
            d,
            seed,
            layout: SketchLayout::Summed,
            hvp_batches: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::invalid(format!("sketch dimension must be ≥ 2, got {}", self.d)));
        }
        if self.hvp_batches == 0 {
            return Err(Error::invalid("hvp_batches must be ≥ 1"));
        }
        Ok(())
    }
}

/// The embedding `Φ` regenerated row by row from a single seed.
///
/// Row `r` is a length-`N` vector with `N(0, 1/d)` entries: dense for the
/// summed layout, and supported on one layer segment for the concatenated
/// layout (rows `l·d .. (l+1)·d` belong to layer `l`).
#[derive(Clone, Debug)]
pub struct Embedding {
    d: usize,
    layout: SketchLayout,
    segments: Layout,
    rows_rng: SeededRng,
}

impl Embedding {
    pub fn new(segments: &Layout, cfg: &SketchConfig) -> Result<Self> {
        cfg.validate()?;
        segments.validate()?;
        if segments.is_empty() {
            return Err(Error::EmptyDimension("embedding input"));
        }
        Ok(Self {
            d: cfg.d,
            layout: cfg.layout,
            segments: segments.clone(),
            rows_rng: SeededRng::for_component(cfg.seed, "sketch-embedding"),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.segments.len()
    }

    pub fn output_dim(&self) -> usize {
        match self.layout {
            SketchLayout::Summed => self.d,
            SketchLayout::Concatenated => self.d * self.segments.segments.len(),
        }
    }

    /// Row `r` of `Φ`.
    pub fn row(&self, r: usize) -> DenseVector {
        let n = self.input_dim();
        let mut rng = self.rows_rng.substream(r as u64);
        let sd = (1.0 / self.d as f64).sqrt();
        match self.layout {
            SketchLayout::Summed => DenseVector::from_fn(n, |_, _| sd * rng.standard_normal()),
            SketchLayout::Concatenated => {
                let seg = self.segments.segments[r / self.d];
                let mut v = DenseVector::zeros(n);
                for k in seg.offset..seg.offset + seg.len {
                    v[k] = sd * rng.standard_normal();
                }
                v
            }
        }
    }

    /// Dense `Φ`, for tests and small problems.
    pub fn materialize(&self) -> DenseMatrix {
        let mut phi = DenseMatrix::zeros(self.output_dim(), self.input_dim());
        for r in 0..self.output_dim() {
            phi.set_row(r, &self.row(r).transpose());
        }
        phi
    }

    /// `Φ g`.
    pub fn embed(&self, g: &DenseVector) -> Result<DenseVector> {
        if g.len() != self.input_dim() {
            return Err(Error::mismatch("embedding input", self.input_dim(), g.len()));
        }
        let out: Vec<f64> = (0..self.output_dim())
            .into_par_iter()
            .map(|r| self.row(r).dot(g))
            .collect();
        Ok(DenseVector::from_vec(out))
    }
}

/// Embeds a gradient with the given layout (`Φ g`).
pub fn embed(g: &DenseVector, segments: &Layout, cfg: &SketchConfig) -> Result<DenseVector> {
    Embedding::new(segments, cfg)?.embed(g)
}

/// `Φ H Φᵀ`, symmetrised. Column `j` of `HΦᵀ` averages `cfg.hvp_batches`
/// operator draws taken from substream `j` of the sketch's own stream.
pub fn sketch_operator<O: StochasticHvp + ?Sized>(op: &O, segments: &Layout, cfg: &SketchConfig) -> Result<DenseMatrix> {
    let emb = Embedding::new(segments, cfg)?;
    if emb.input_dim() != op.dim() {
        return Err(Error::mismatch("sketch layout", op.dim(), emb.input_dim()));
    }
    let m = emb.output_dim();
    let hvp_rng = SeededRng::for_component(cfg.seed, "sketch-hvp");
    let columns: Vec<DenseVector> = (0..m)
        .into_par_iter()
        .map(|j| {
            let phi = emb.row(j);
            let mut r = hvp_rng.substream(j as u64);
            let mut acc = op.hvp(&phi, &mut r)?;
            for _ in 1..cfg.hvp_batches {
                acc += op.hvp(&phi, &mut r)?;
            }
            Ok(acc / cfg.hvp_batches as f64)
        })
        .collect::<Result<_>>()?;
    let y = DenseMatrix::from_columns(&columns);
    let rows: Vec<DenseVector> = (0..m)
        .into_par_iter()
        .map(|i| y.tr_mul(&emb.row(i)))
        .collect();
    let mut sketch = DenseMatrix::zeros(m, m);
    for (i, row) in rows.iter().enumerate() {
        sketch.set_row(i, &row.transpose());
    }
    if sketch.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sketch".into()));
    }
    Ok(symmetrize(&sketch))
}

/// Top-`k` eigenvalues of a sketch, each shifted by `−Tr(sketch)/d`.
pub fn top_eigenvalues_from_sketch(sketch: &DenseMatrix, k: usize) -> Result<DenseVector> {
    let d = sketch.nrows();
    if k > d {
        return Err(Error::invalid(format!("requested {k} eigenvalues of a {d}×{d} sketch")));
    }
    let eig = sym_eig(sketch)?;
    let shift = sketch.trace() / d as f64;
    Ok(DenseVector::from_iterator(k, eig.values.iter().take(k).map(|v| v - shift)))
}

/// Largest shifted eigenvalue of a sketch.
pub fn top_eigenvalue_from_sketch(sketch: &DenseMatrix) -> Result<f64> {
    Ok(top_eigenvalues_from_sketch(sketch, 1)?[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralStats {
    /// Estimates `Tr(H)/N`.
    pub trace_per_param: MeanSe,
    /// Estimates `Tr(H²)/N`; absent when only published inputs are known.
    pub frobenius_sq_per_param: Option<MeanSe>,
    pub lambda_max: f64,
    pub n_params: usize,
}

impl SpectralStats {
    pub fn trace(&self) -> f64 {
        self.trace_per_param.mean * self.n_params as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub eta: f64,
    pub batch_size_min: usize,
    /// `None` without damping, where no finite step count follows.
    pub t_steps: Option<usize>,
    pub lambda_damp: f64,
    pub c: f64,
}

/// `η = 1/(λ_max + λ)`, `|B| = ⌈C Tr(H)/λ_max⌉`, `T = ⌈t_multiplier/(λη)⌉`.
pub fn recommend_hyperparams(stats: &SpectralStats, lambda_damp: f64, c: f64, t_multiplier: f64) -> Result<HyperParams> {
    let trace = stats.trace();
    if !(stats.lambda_max > 0.0) || !stats.lambda_max.is_finite() {
        return Err(Error::invalid(format!("λ_max must be positive, got {}", stats.lambda_max)));
    }
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(Error::invalid(format!("trace estimate must be positive, got {trace}")));
    }
    if !(lambda_damp >= 0.0) || !(c > 0.0) || !(t_multiplier > 0.0) {
        return Err(Error::invalid("need λ ≥ 0, C > 0 and a positive step multiplier"));
    }
    let eta = 1.0 / (stats.lambda_max + lambda_damp);
    let batch = (c * trace / stats.lambda_max).ceil().max(1.0);
    let t_steps = (lambda_damp > 0.0).then(|| (t_multiplier / (lambda_damp * eta)).ceil().max(1.0) as usize);
    Ok(HyperParams {
        eta,
        batch_size_min: batch as usize,
        t_steps,
        lambda_damp,
        c,
    })
}

/// Probe budget and sketch settings for [`spectral_stats`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsConfig {
    pub trace_probes: usize,
    pub frobenius_probes: usize,
    pub sketch: SketchConfig,
}

/// Trace, Frobenius and sketched top eigenvalue of a GNH operator.
///
/// The sketch uses the operator's own batch source; the probes do too.
pub fn spectral_stats(op: &GnhOperator, cfg: &StatsConfig, rng: &mut SeededRng) -> Result<SpectralStats> {
    let trace = estimate_trace(op, cfg.trace_probes, rng)?;
    let frob = if cfg.frobenius_probes >= 2 {
        Some(estimate_frobenius(op, cfg.frobenius_probes, rng)?)
    } else {
        None
    };
    let sketch = sketch_operator(op, op.theta.layout(), &cfg.sketch)?;
    let lambda_max = top_eigenvalue_from_sketch(&sketch)?.max(0.0);
    Ok(SpectralStats {
        trace_per_param: trace,
        frobenius_sq_per_param: frob,
        lambda_max,
        n_params: op.theta.len(),
    })
}

/// One Table-1 style record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StatsRecord {
    pub model: String,
    pub n_params: usize,
    pub trace_per_param: f64,
    pub trace_per_param_se: f64,
    pub frobenius_sq_per_param: Option<f64>,
    pub frobenius_sq_per_param_se: Option<f64>,
    pub lambda_max: f64,
    pub lambda_damp: f64,
    pub eta: f64,
    pub batch_size_min: usize,
    pub t_steps: Option<usize>,
}

impl StatsRecord {
    pub fn new(model: impl Into<String>, stats: &SpectralStats, hp: &HyperParams) -> Self {
        Self {
            model: model.into(),
            n_params: stats.n_params,
            trace_per_param: stats.trace_per_param.mean,
            trace_per_param_se: stats.trace_per_param.se,
            frobenius_sq_per_param: stats.frobenius_sq_per_param.map(|m| m.mean),
            frobenius_sq_per_param_se: stats.frobenius_sq_per_param.map(|m| m.se),
            lambda_max: stats.lambda_max,
            lambda_damp: hp.lambda_damp,
            eta: hp.eta,
            batch_size_min: hp.batch_size_min,
            t_steps: hp.t_steps,
        }
    }
}

#[derive(Serialize)]
struct Report<'a> {
    model: &'a [StatsRecord],
}

/// TOML report with one `[[model]]` table per record.
pub fn stats_report(records: &[StatsRecord]) -> Result<String> {
    toml::to_string(&Report { model: records }).map_err(|e| Error::Config(e.to_string()))
}

/// One row of the second-moment condition check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct C1Point {
    pub batch_size: usize,
    /// Estimates `Tr(E H̃² − H²)/N`.
    pub lhs_trace: MeanSe,
    /// `Tr(H)²/(N|B|)`, i.e. the right-hand side with `C = 1`.
    pub rhs_trace: f64,
}

/// Compares `Tr(E H̃² − H²)/N` with `Tr(H)²/(N|B|)` for one sampler.
///
/// `sampled` draws `H̃`, `reference` applies `H` deterministically. Each
/// probe `g ~ N(0, I/N)` contributes `‖H̃g‖² − ‖Hg‖²`; the same probes give
/// the trace `N·mean(gᵀHg)` used on the right-hand side.
pub fn condition_c1_point<S, R>(
    sampled: &S,
    reference: &R,
    batch_size: usize,
    n_probes: usize,
    rng: &mut SeededRng,
) -> Result<C1Point>
where
    S: StochasticHvp + ?Sized,
    R: StochasticHvp + ?Sized,
{
    check_probes(n_probes)?;
    if sampled.dim() != reference.dim() {
        return Err(Error::mismatch("condition check operators", reference.dim(), sampled.dim()));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let n = sampled.dim();
    let base = rng.fork();
    let pairs: Vec<(f64, f64)> = (0..n_probes)
        .into_par_iter()
        .map(|i| {
            let mut r = base.substream(i as u64);
            let g = r.gaussian_vector(n, 1.0 / n as f64)?;
            let hg = reference.hvp(&g, &mut r)?;
            let sg = sampled.hvp(&g, &mut r)?;
            Ok((sg.norm_squared() - hg.norm_squared(), g.dot(&hg)))
        })
        .collect::<Result<_>>()?;
    let (lhs, quad): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let trace = n as f64 * crate::linalg::pairwise_sum_scalars(&quad) / n_probes as f64;
    Ok(C1Point {
        batch_size,
        lhs_trace: MeanSe::from_samples(&lhs)?,
        rhs_trace: trace * trace / (n as f64 * batch_size as f64),
    })
}

/// Runs [`condition_c1_point`] for each batch source of a GNH operator,
/// against its full-dataset operator.
pub fn check_condition_c1(
    op: &GnhOperator,
    sources: &[BatchSource],
    n_probes: usize,
    rng: &mut SeededRng,
) -> Result<Vec<C1Point>> {
    let reference = op.full();
    sources
        .iter()
        .map(|&source| {
            let batch_size = match source {
                BatchSource::Full => op.data.len(),
                BatchSource::Sampled { batch_size } => batch_size,
            };
            let sampled = op.with_source(source);
            condition_c1_point(&sampled, &reference, batch_size, n_probes, rng)
        })
        .collect()
}
