//! LiSSA iterations `uᵗ = uᵗ⁻¹ − η[(H̃ᵗ + λ)uᵗ⁻¹ − g]`, the exact inverse
//! oracle and convergence diagnostics.

pub mod counterexample;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnh::{BatchSource, GnhOperator};
use crate::linalg::{solve_shifted, DenseMatrix, DenseVector};
use crate::operator::StochasticHvp;
use crate::rng::SeededRng;
use crate::stats::pearson_corr;

/// Component name of the batch stream. Solvers that must see the same
/// batches as a LiSSA run (PBRF finetuning) derive their rng from it too.
pub const BATCH_STREAM: &str = "lissa-batches";

/// Abort once `‖u‖ > DIVERGENCE_FACTOR · (‖g‖/λ + ‖u⁰‖)`.
pub const DIVERGENCE_FACTOR: f64 = 1e12;

#[derive(Clone, Debug, PartialEq)]
pub struct LissaConfig {
    pub eta: f64,
    pub lambda_damp: f64,
    pub t_steps: usize,
    pub seed: u64,
    /// Starting iterate, zero when absent.
    pub u0: Option<DenseVector>,
    /// Keep a copy of `u` every this many steps (and always at `T`);
    /// 0 keeps only the final iterate.
    pub snapshot_every: usize,
}

impl LissaConfig {
    pub fn new(eta: f64, lambda_damp: f64, t_steps: usize, seed: u64) -> Self {
        Self {
            eta,
            lambda_damp,
            t_steps,
            seed,
            u0: None,
            snapshot_every: 0,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::invalid(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.lambda_damp >= 0.0) || !self.lambda_damp.is_finite() {
            return Err(Error::invalid(format!("lambda_damp must be ≥ 0, got {}", self.lambda_damp)));
        }
        if self.t_steps == 0 {
            return Err(Error::invalid("need at least one step"));
        }
        if let Some(u0) = &self.u0 {
            if u0.len() != dim {
                return Err(Error::mismatch("LiSSA u0", dim, u0.len()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LissaTrace {
    /// `(step, uᵗ)` with strictly increasing steps.
    pub snapshots: Vec<(usize, DenseVector)>,
    /// `‖uᵗ‖` for `t = 0..=T`.
    pub norms: Vec<f64>,
}

impl LissaTrace {
    pub fn last(&self) -> Option<&DenseVector> {
        self.snapshots.last().map(|(_, u)| u)
    }

    pub fn steps(&self) -> Vec<usize> {
        self.snapshots.iter().map(|(s, _)| *s).collect()
    }
}

/// Runs `T` LiSSA steps with a fresh operator draw per step.
pub fn lissa_solve<O: StochasticHvp + ?Sized>(
    op: &O,
    g: &DenseVector,
    cfg: &LissaConfig,
) -> Result<(DenseVector, LissaTrace)> {
    let n = op.dim();
    if g.len() != n {
        return Err(Error::mismatch("LiSSA right-hand side", n, g.len()));
    }
    cfg.validate(n)?;
    let mut rng = SeededRng::for_component(cfg.seed, BATCH_STREAM);
    let mut u = cfg.u0.clone().unwrap_or_else(|| DenseVector::zeros(n));
    let limit = DIVERGENCE_FACTOR * (g.norm() / cfg.lambda_damp + u.norm());
    let mut norms = Vec::with_capacity(cfg.t_steps + 1);
    norms.push(u.norm());
    let mut snapshots = Vec::new();
    for step in 1..=cfg.t_steps {
        let hu = op.hvp(&u, &mut rng)?;
        // u ← u − η[(H̃ + λ)u − g]
        let grad = hu + &u * cfg.lambda_damp - g;
        u.axpy(-cfg.eta, &grad, 1.0);
        let norm = u.norm();
        norms.push(norm);
        if !norm.is_finite() || norm > limit {
            return Err(Error::Divergence { step, norm });
        }
        let keep = step == cfg.t_steps || (cfg.snapshot_every > 0 && step % cfg.snapshot_every == 0);
        if keep {
            snapshots.push((step, u.clone()));
        }
    }
    Ok((u, LissaTrace { snapshots, norms }))
}

/// Dense solve of `(H + λI)u = g`.
pub fn exact_ihvp(h: &DenseMatrix, lambda_damp: f64, g: &DenseVector) -> Result<DenseVector> {
    if !crate::linalg::is_symmetric(h, crate::linalg::SYMMETRY_TOL) {
        return Err(Error::Contract("exact_ihvp needs a symmetric matrix".into()));
    }
    solve_shifted(h, lambda_damp, g)
}

/// What the snapshot influences are correlated against.
#[derive(Clone, Debug, PartialEq)]
pub enum Reference {
    FinalSnapshot,
    Exact(DenseVector),
}

/// Pearson correlation between `{⟨uₛ, ∇f_i⟩}_i` at every snapshot `s` and the
/// reference influences.
pub fn convergence_correlation(
    trace: &LissaTrace,
    test_grads: &[DenseVector],
    reference: &Reference,
) -> Result<Vec<(usize, f64)>> {
    if test_grads.len() < 2 {
        return Err(Error::invalid("need at least 2 test gradients"));
    }
    let ref_u = match reference {
        Reference::FinalSnapshot => trace
            .last()
            .ok_or_else(|| Error::invalid("trace has no snapshots"))?,
        Reference::Exact(u) => u,
    };
    let scores = |u: &DenseVector| -> Vec<f64> { test_grads.iter().map(|t| u.dot(t)).collect() };
    let target = scores(ref_u);
    trace
        .snapshots
        .iter()
        .map(|(step, u)| Ok((*step, pearson_corr(&scores(u), &target)?)))
        .collect()
}

/// First step after which the series stays at or above `threshold`.
pub fn steps_to_reach(series: &[(usize, f64)], threshold: f64) -> Option<usize> {
    let mut first = None;
    for &(step, c) in series {
        if c >= threshold {
            first.get_or_insert(step);
        } else {
            first = None;
        }
    }
    first
}

/// Snapshot-wise mean of several runs with identical snapshot steps.
pub fn average_traces(traces: &[LissaTrace]) -> Result<LissaTrace> {
    let first = traces.first().ok_or_else(|| Error::invalid("no traces to average"))?;
    let steps = first.steps();
    if traces.iter().any(|t| t.steps() != steps) {
        return Err(Error::invalid("traces have different snapshot steps"));
    }
    let m = traces.len() as f64;
    let snapshots: Vec<(usize, DenseVector)> = steps
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let sum = traces
                .iter()
                .fold(DenseVector::zeros(first.snapshots[k].1.len()), |acc, t| acc + &t.snapshots[k].1);
            (s, sum / m)
        })
        .collect();
    let norms = std::iter::once(first.norms[0])
        .chain(snapshots.iter().map(|(_, u)| u.norm()))
        .collect();
    Ok(LissaTrace { snapshots, norms })
}

/// The batch-noise floor `η² Tr(H)/|B| · gᵀ(H+λ)⁻¹g`.
pub fn sampling_error_bound(eta: f64, trace: f64, batch_size: usize, g: &DenseVector, u_star: &DenseVector) -> f64 {
    eta * eta * trace / batch_size as f64 * g.dot(u_star)
}

/// Mean-iterate error at one step over many independent runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanIterateError {
    pub step: usize,
    /// `‖ūᵗ − u⋆‖`.
    pub error: f64,
    /// `(1 − λη)ᵗ ‖u⁰ − u⋆‖`.
    pub bound: f64,
    /// Standard error of `ūᵗ` in norm, `√(Σ_i Var(uᵗ_i)/M)`.
    pub mc_se: f64,
}

impl MeanIterateError {
    pub fn holds(&self, k: f64) -> bool {
        self.error <= self.bound + k * self.mc_se
    }
}

/// Runs LiSSA once per seed and compares the averaged iterate with `u⋆` at
/// the requested steps (each must be a snapshot step of the runs).
pub fn mean_iterate_errors<O: StochasticHvp + ?Sized>(
    op: &O,
    g: &DenseVector,
    cfg: &LissaConfig,
    seeds: &[u64],
    steps: &[usize],
    u_star: &DenseVector,
) -> Result<Vec<MeanIterateError>> {
    if seeds.len() < 2 {
        return Err(Error::invalid("need at least 2 runs"));
    }
    let cfg = LissaConfig {
        snapshot_every: 1,
        ..cfg.clone()
    };
    let traces: Vec<LissaTrace> = seeds
        .par_iter()
        .map(|&seed| {
            let c = LissaConfig { seed, ..cfg.clone() };
            lissa_solve(op, g, &c).map(|(_, t)| t)
        })
        .collect::<Result<_>>()?;
    let u0 = cfg.u0.clone().unwrap_or_else(|| DenseVector::zeros(op.dim()));
    let m = seeds.len() as f64;
    steps
        .iter()
        .map(|&step| {
            if step == 0 || step > cfg.t_steps {
                return Err(Error::invalid(format!("step {step} outside 1..={}", cfg.t_steps)));
            }
            let at: Vec<&DenseVector> = traces.iter().map(|t| &t.snapshots[step - 1].1).collect();
            let mean = at.iter().fold(DenseVector::zeros(op.dim()), |a, u| a + *u) / m;
            let var_sum: f64 = at.iter().map(|u| (*u - &mean).norm_squared()).sum::<f64>() / (m - 1.0);
            Ok(MeanIterateError {
                step,
                error: (&mean - u_star).norm(),
                bound: (1.0 - cfg.lambda_damp * cfg.eta).powi(step as i32) * (&u0 - u_star).norm(),
                mc_se: (var_sum / m).sqrt(),
            })
        })
        .collect()
}

/// One batch-size arm of a convergence study.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSetting {
    pub batch_size: usize,
    /// Independent runs whose iterates are averaged before correlating.
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceSeries {
    pub setting: BatchSetting,
    /// `(step, Pearson to the final averaged iterate)`; empty if any trial diverged.
    pub series: Vec<(usize, f64)>,
    /// First snapshot from which the series stays above the threshold, not
    /// counting the final (reference) snapshot.
    pub steps_to_threshold: Option<usize>,
    pub diverged: usize,
}

/// Runs every batch setting on the same problem and reports how quickly the
/// test influences settle. Trials of an arm are averaged iterate-wise, so an
/// arm of `trials` runs at `|B|` uses the data of one run at `trials·|B|`.
pub fn batch_size_study(
    op: &GnhOperator,
    g: &DenseVector,
    cfg: &LissaConfig,
    settings: &[BatchSetting],
    test_grads: &[DenseVector],
    threshold: f64,
) -> Result<Vec<ConvergenceSeries>> {
    if cfg.snapshot_every == 0 {
        return Err(Error::invalid("convergence study needs snapshot_every > 0"));
    }
    let base = SeededRng::for_component(cfg.seed, "convergence-trials");
    settings
        .iter()
        .enumerate()
        .map(|(k, &setting)| {
            if setting.trials == 0 {
                return Err(Error::invalid("each batch setting needs at least one trial"));
            }
            let arm = op.with_source(BatchSource::Sampled {
                batch_size: setting.batch_size,
            });
            let stream = base.substream(k as u64);
            let runs: Vec<Result<LissaTrace>> = (0..setting.trials as u64)
                .into_par_iter()
                .map(|trial| {
                    let c = LissaConfig {
                        seed: stream.substream(trial).next_u64(),
                        ..cfg.clone()
                    };
                    lissa_solve(&arm, g, &c).map(|(_, t)| t)
                })
                .collect();
            let diverged = runs.iter().filter(|r| matches!(r, Err(Error::Divergence { .. }))).count();
            if diverged > 0 {
                return Ok(ConvergenceSeries {
                    setting,
                    series: Vec::new(),
                    steps_to_threshold: None,
                    diverged,
                });
            }
            let traces: Vec<LissaTrace> = runs.into_iter().collect::<Result<_>>()?;
            let avg = average_traces(&traces)?;
            let series = convergence_correlation(&avg, test_grads, &Reference::FinalSnapshot)?;
            // the last snapshot is the reference itself and proves nothing
            let informative = &series[..series.len().saturating_sub(1)];
            Ok(ConvergenceSeries {
                setting,
                steps_to_threshold: steps_to_reach(informative, threshold),
                series,
                diverged,
            })
        })
        .collect()
}
