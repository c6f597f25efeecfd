//! Proximal Bregman retraining: the PBO, its SGD finetune, and the influence
//! it induces on test predictions.
//!
//! The iterate is stored as a displacement `δ = θ − θ⋆` so that the tiny
//! moves produced by `ε = 1e-8` are not swallowed by rounding in `θ`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnh::{sample_batch, BatchSource};
use crate::linalg::{pairwise_sum, DenseVector};
use crate::lissa::{LissaConfig, BATCH_STREAM};
use crate::models::{cross_entropy, net, softmax, Dataset, Example, ModelSpec, ParamVector};
use crate::rng::SeededRng;
use crate::stats::{pearson_corr, slope_through_origin};

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// `ℓ(h, y) − ℓ(h_ref, y) − (h − h_ref)ᵀ ∇_h ℓ(h_ref, y)` for cross-entropy.
pub fn bregman_divergence(h: &[f64], h_ref: &[f64], y: usize) -> Result<f64> {
    if h.len() != h_ref.len() {
        return Err(Error::mismatch("Bregman logits", h_ref.len(), h.len()));
    }
    if y >= h.len() {
        return Err(Error::invalid(format!("label {y} outside 0..{}", h.len())));
    }
    let mut grad_ref = softmax(h_ref);
    grad_ref[y] -= 1.0;
    let lin: f64 = h.iter().zip(h_ref).zip(grad_ref.iter()).map(|((a, b), g)| (a - b) * g).sum();
    Ok(cross_entropy(h, y) - cross_entropy(h_ref, y) - lin)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PboConfig {
    /// Weight on the training-point loss. Zero is allowed for finetuning
    /// (the minimizer is then `θ⋆`) but not for influence evaluation.
    pub epsilon: f64,
    pub lambda_damp: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: BatchSource,
    pub seed: u64,
    /// Evaluate the full-data PBO every this many steps (0 disables).
    pub eval_every: usize,
}

impl PboConfig {
    /// Learning rate, steps, damping, seed and batches taken from a LiSSA run.
    pub fn matched(lissa: &LissaConfig, batch: BatchSource) -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            lambda_damp: lissa.lambda_damp,
            lr: lissa.eta,
            steps: lissa.t_steps,
            batch,
            seed: lissa.seed,
            eval_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be finite and ≥ 0, got {}", self.epsilon)));
        }
        if !(self.lambda_damp >= 0.0) || !self.lambda_damp.is_finite() {
            return Err(Error::invalid(format!("lambda_damp must be ≥ 0, got {}", self.lambda_damp)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if let BatchSource::Sampled { batch_size: 0 } = self.batch {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PbrfResult {
    pub theta_pbrf: ParamVector,
    /// `θ_PBRF − θ⋆`, kept separately at full precision.
    pub displacement: DenseVector,
    /// Filled by [`pbrf_influence`] callers; empty after finetuning.
    pub influences: BTreeMap<usize, f64>,
    /// Full-data PBO at the returned iterate.
    pub final_pbo: f64,
    pub displacement_norm: f64,
    /// `(step, full-data PBO)` every `eval_every` steps.
    pub pbo_trace: Vec<(usize, f64)>,
    pub steps_run: usize,
    /// Set when an update produced a non-finite value; the result then holds
    /// the last finite iterate.
    pub overflow: bool,
}

fn check_fixture(spec: &ModelSpec, theta_star: &ParamVector, train_point: &Example) -> Result<()> {
    spec.validate()?;
    if theta_star.len() != spec.n_params() {
        return Err(Error::mismatch("θ⋆", spec.n_params(), theta_star.len()));
    }
    if train_point.x.len() != spec.input_dim() {
        return Err(Error::mismatch("training point features", spec.input_dim(), train_point.x.len()));
    }
    if train_point.y >= spec.n_classes() {
        return Err(Error::invalid("training point label outside the model's classes"));
    }
    Ok(())
}

fn shifted(theta_star: &ParamVector, delta: &DenseVector) -> DenseVector {
    &theta_star.values + delta
}

fn pbo_value_at(
    spec: &ModelSpec,
    theta: &[f64],
    theta_star: &[f64],
    delta: &DenseVector,
    train_point: &Example,
    batch: &[Example],
    cfg: &PboConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyDimension("PBO batch"));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for ex in batch {
        let h = net::forward(spec, theta, ex.x.as_slice());
        let h_ref = net::forward(spec, theta_star, ex.x.as_slice());
        terms.push(bregman_divergence(h.logits(), h_ref.logits(), ex.y)?);
    }
    let d = crate::linalg::pairwise_sum_scalars(&terms) / batch.len() as f64;
    let train = cross_entropy(net::forward(spec, theta, train_point.x.as_slice()).logits(), train_point.y);
    Ok(d + cfg.epsilon * train + 0.5 * cfg.lambda_damp * delta.norm_squared())
}

fn pbo_gradient_at(
    spec: &ModelSpec,
    theta: &[f64],
    theta_star: &[f64],
    delta: &DenseVector,
    train_point: &Example,
    batch: &[Example],
    cfg: &PboConfig,
) -> Result<DenseVector> {
    if batch.is_empty() {
        return Err(Error::EmptyDimension("PBO batch"));
    }
    let n = theta.len();
    // ∇_θ D = Jᵀ(sf(h) − sf(h⋆)); the label terms cancel.
    let terms: Vec<DenseVector> = batch
        .iter()
        .map(|ex| {
            let cache = net::forward(spec, theta, ex.x.as_slice());
            let h_ref = net::forward(spec, theta_star, ex.x.as_slice());
            let w = softmax(cache.logits()) - softmax(h_ref.logits());
            net::backward(spec, theta, &cache, w.as_slice())
        })
        .collect();
    let mut grad = pairwise_sum(batch.len(), n, &|i| terms[i].clone()) / batch.len() as f64;
    if cfg.epsilon != 0.0 {
        let cache = net::forward(spec, theta, train_point.x.as_slice());
        let mut w = softmax(cache.logits());
        w[train_point.y] -= 1.0;
        grad.axpy(cfg.epsilon, &net::backward(spec, theta, &cache, w.as_slice()), 1.0);
    }
    grad.axpy(cfg.lambda_damp, delta, 1.0);
    Ok(grad)
}

/// Batch mean of `D(h(x;θ), h(x;θ⋆), y)` plus `ε ℓ(train; θ) + (λ/2)‖θ − θ⋆‖²`.
pub fn pbo_objective(
    spec: &ModelSpec,
    theta: &ParamVector,
    theta_star: &ParamVector,
    train_point: &Example,
    batch: &[Example],
    cfg: &PboConfig,
) -> Result<f64> {
    check_fixture(spec, theta_star, train_point)?;
    if theta.len() != theta_star.len() {
        return Err(Error::mismatch("PBO parameters", theta_star.len(), theta.len()));
    }
    let delta = &theta.values - &theta_star.values;
    pbo_value_at(spec, theta.as_slice(), theta_star.as_slice(), &delta, train_point, batch, cfg)
}

pub fn pbo_gradient(
    spec: &ModelSpec,
    theta: &ParamVector,
    theta_star: &ParamVector,
    train_point: &Example,
    batch: &[Example],
    cfg: &PboConfig,
) -> Result<ParamVector> {
    check_fixture(spec, theta_star, train_point)?;
    if theta.len() != theta_star.len() {
        return Err(Error::mismatch("PBO parameters", theta_star.len(), theta.len()));
    }
    let delta = &theta.values - &theta_star.values;
    let g = pbo_gradient_at(spec, theta.as_slice(), theta_star.as_slice(), &delta, train_point, batch, cfg)?;
    theta.with_values(g)
}

/// SGD on the PBO from `θ⋆`. With `BatchSource::Sampled` the batches are
/// drawn from the same stream as [`crate::lissa::lissa_solve`], so a matched
/// config sees the same batch at every step.
pub fn pbrf_finetune(
    spec: &ModelSpec,
    theta_star: &ParamVector,
    train_point: &Example,
    data: &Dataset,
    cfg: &PboConfig,
) -> Result<PbrfResult> {
    check_fixture(spec, theta_star, train_point)?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDimension("dataset"));
    }
    if data.dim() != spec.input_dim() {
        return Err(Error::mismatch("dataset features", spec.input_dim(), data.dim()));
    }
    let star = theta_star.as_slice();
    let mut rng = SeededRng::for_component(cfg.seed, BATCH_STREAM);
    let mut delta = DenseVector::zeros(theta_star.len());
    let mut pbo_trace = Vec::new();
    let mut overflow = false;
    let mut steps_run = 0;
    for step in 1..=cfg.steps {
        let theta = shifted(theta_star, &delta);
        let grad = match cfg.batch {
            BatchSource::Full => {
                pbo_gradient_at(spec, theta.as_slice(), star, &delta, train_point, data.examples(), cfg)?
            }
            BatchSource::Sampled { batch_size } => {
                let batch = sample_batch(data, batch_size, &mut rng)?;
                pbo_gradient_at(spec, theta.as_slice(), star, &delta, train_point, &batch.examples, cfg)?
            }
        };
        let next = &delta - grad * cfg.lr;
        if !next.iter().all(|v| v.is_finite()) {
            overflow = true;
            break;
        }
        delta = next;
        steps_run = step;
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            let theta = shifted(theta_star, &delta);
            let v = pbo_value_at(spec, theta.as_slice(), star, &delta, train_point, data.examples(), cfg)?;
            if !v.is_finite() {
                overflow = true;
                break;
            }
            pbo_trace.push((step, v));
        }
    }
    let theta = shifted(theta_star, &delta);
    let final_pbo = pbo_value_at(spec, theta.as_slice(), star, &delta, train_point, data.examples(), cfg)?;
    if !final_pbo.is_finite() {
        overflow = true;
    }
    Ok(PbrfResult {
        theta_pbrf: theta_star.with_values(theta)?,
        displacement_norm: delta.norm(),
        displacement: delta,
        influences: BTreeMap::new(),
        final_pbo,
        pbo_trace,
        steps_run,
        overflow,
    })
}

/// `−(ℓ(test; θ_PBRF) − ℓ(test; θ⋆))/ε`, keyed by test id.
///
/// This is `⟨θ_PBRF − θ⋆, ∇ log p(test)⟩/ε` to first order, which lines up
/// with LiSSA scores `⟨u, ∇ log p(test)⟩` where `(H + λ)u = −∇ℓ(train)`.
pub fn pbrf_influence(
    spec: &ModelSpec,
    result: &PbrfResult,
    theta_star: &ParamVector,
    tests: &Dataset,
    epsilon: f64,
) -> Result<BTreeMap<usize, f64>> {
    if result.overflow {
        return Err(Error::NonFinite("PBRF finetune overflowed".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::invalid("PBRF influence needs ε > 0"));
    }
    if result.theta_pbrf.len() != theta_star.len() {
        return Err(Error::mismatch("θ_PBRF", theta_star.len(), result.theta_pbrf.len()));
    }
    if tests.dim() != spec.input_dim() {
        return Err(Error::mismatch("test features", spec.input_dim(), tests.dim()));
    }
    let mut out = BTreeMap::new();
    for (id, ex) in tests.ids().iter().zip(tests.examples()) {
        let h1 = net::forward(spec, result.theta_pbrf.as_slice(), ex.x.as_slice());
        let h0 = net::forward(spec, theta_star.as_slice(), ex.x.as_slice());
        let score = -(cross_entropy(h1.logits(), ex.y) - cross_entropy(h0.logits(), ex.y)) / epsilon;
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("PBRF influence on test {id}")));
        }
        out.insert(*id, score);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Agreement {
    Agreeing,
    NearZero,
    Disagreeing,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Both score vectors below this in max-abs count as near zero.
    pub near_zero: f64,
    /// Relative residual `‖pbrf − lissa‖/‖lissa‖` at or below this agrees.
    pub residual: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            near_zero: 1e-3,
            residual: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub train_id: usize,
    pub test_id: usize,
    pub lissa: f64,
    pub pbrf: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub pearson: f64,
    /// Least-squares slope of PBRF on LiSSA through the origin.
    pub slope: f64,
    pub relative_residual: f64,
    pub max_abs: f64,
    pub rows: Vec<ScatterRow>,
}

impl Comparison {
    pub fn classify(&self, t: &Thresholds) -> Agreement {
        if self.max_abs < t.near_zero {
            Agreement::NearZero
        } else if self.relative_residual <= t.residual {
            Agreement::Agreeing
        } else {
            Agreement::Disagreeing
        }
    }
}

/// Pairs the two score maps by test id.
pub fn compare_influences(
    train_id: usize,
    lissa: &BTreeMap<usize, f64>,
    pbrf: &BTreeMap<usize, f64>,
) -> Result<Comparison> {
    if lissa.len() != pbrf.len() || lissa.keys().zip(pbrf.keys()).any(|(a, b)| a != b) {
        return Err(Error::invalid("LiSSA and PBRF scores cover different test ids"));
    }
    if lissa.len() < 10 {
        return Err(Error::invalid(format!("need at least 10 test points, got {}", lissa.len())));
    }
    let x: Vec<f64> = lissa.values().copied().collect();
    let y: Vec<f64> = pbrf.values().copied().collect();
    let rows = lissa
        .iter()
        .zip(&y)
        .map(|((&test_id, &l), &p)| ScatterRow {
            train_id,
            test_id,
            lissa: l,
            pbrf: p,
        })
        .collect();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let resid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| b - a).collect();
    let lissa_norm = norm(&x);
    Ok(Comparison {
        pearson: pearson_corr(&x, &y)?,
        slope: slope_through_origin(&x, &y)?,
        relative_residual: if lissa_norm > 0.0 { norm(&resid) / lissa_norm } else { f64::INFINITY },
        max_abs: x.iter().chain(&y).fold(0.0_f64, |m, v| m.max(v.abs())),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::gnh::{gnh_matrix_exact, GnhOperator, HvpMode};
    use crate::lissa::{exact_ihvp, lissa_solve};
    use crate::models::train::{train_full_batch, TrainConfig};
    use crate::models::{loss_gradient, test_gradient, Activation, SyntheticSpec};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn fixture(spec: ModelSpec, n: usize, seed: u64) -> (ModelSpec, ParamVector, Dataset) {
        let mut rng = SeededRng::new(seed);
        let data = SyntheticSpec {
            n_classes: spec.n_classes(),
            dim: spec.input_dim(),
            n_examples: n,
            separation: 1.0,
        }
        .generate(&mut rng)
        .unwrap();
        let theta0 = spec.init_params(&mut rng);
        let cfg = TrainConfig {
            lr: 0.3,
            steps: 300,
            weight_decay: 1e-3,
        };
        let (theta, _) = train_full_batch(&spec, &theta0, &data, &cfg).unwrap();
        (spec, theta, data)
    }

    #[test]
    fn bregman_examples() {
        let d = bregman_divergence(&[1.0, -1.0], &[0.0, 0.0], 0).unwrap();
        let expected = (1.0 + (-2.0f64).exp()).ln() - 2.0f64.ln() + 1.0;
        assert_relative_eq!(d, expected, epsilon = 1e-14);
        assert_relative_eq!(d, 0.4338, epsilon = 1e-4);
        assert_eq!(bregman_divergence(&[0.3, 2.0, -1.0], &[0.3, 2.0, -1.0], 2).unwrap(), 0.0);
        assert!(bregman_divergence(&[0.0], &[0.0, 1.0], 0).is_err());
    }

    proptest! {
        #[test]
        fn bregman_is_nonnegative(
            h in prop::collection::vec(-8.0f64..8.0, 4),
            r in prop::collection::vec(-8.0f64..8.0, 4),
            y in 0usize..4,
        ) {
            prop_assert!(bregman_divergence(&h, &r, y).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn pbo_at_theta_star() {
        let (spec, theta, data) = fixture(ModelSpec::softmax_linear(3, 3).unwrap(), 40, 1);
        let train = data.get(0).clone();
        let mut cfg = PboConfig {
            epsilon: 0.1,
            lambda_damp: 0.5,
            lr: 0.1,
            steps: 1,
            batch: BatchSource::Full,
            seed: 0,
            eval_every: 0,
        };
        let v = pbo_objective(&spec, &theta, &theta, &train, data.examples(), &cfg).unwrap();
        let l = crate::models::loss_value(&spec, &theta, &train).unwrap();
        assert_relative_eq!(v, 0.1 * l, max_relative = 1e-12);
        cfg.epsilon = 0.0;
        assert_eq!(pbo_objective(&spec, &theta, &theta, &train, data.examples(), &cfg).unwrap(), 0.0);
    }

    #[test]
    fn pbo_gradient_matches_central_differences() {
        let spec = ModelSpec::mlp(vec![3, 4, 3], Activation::Tanh).unwrap();
        let (spec, star, data) = fixture(spec, 30, 2);
        let train = data.get(3).clone();
        let cfg = PboConfig {
            epsilon: 0.3,
            lambda_damp: 0.2,
            lr: 0.1,
            steps: 1,
            batch: BatchSource::Full,
            seed: 0,
            eval_every: 0,
        };
        let mut rng = SeededRng::new(9);
        let theta = star.with_values(&star.values + rng.gaussian_vector(star.len(), 0.04).unwrap()).unwrap();
        let g = pbo_gradient(&spec, &theta, &star, &train, data.examples(), &cfg).unwrap();
        let h = 1e-5;
        for _ in 0..10 {
            let v = rng.unit_vector(star.len()).unwrap();
            let at = |s: f64| {
                let t = theta.with_values(&theta.values + &v * s).unwrap();
                pbo_objective(&spec, &t, &star, &train, data.examples(), &cfg).unwrap()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let an = g.dot(&v);
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "fd {fd} vs {an}");
        }
    }

    #[test]
    fn zero_epsilon_stays_at_theta_star() {
        let (spec, star, data) = fixture(ModelSpec::softmax_linear(3, 3).unwrap(), 40, 3);
        let cfg = PboConfig {
            epsilon: 0.0,
            lambda_damp: 0.1,
            lr: 0.5,
            steps: 50,
            batch: BatchSource::Sampled { batch_size: 4 },
            seed: 7,
            eval_every: 0,
        };
        let r = pbrf_finetune(&spec, &star, data.get(0), &data, &cfg).unwrap();
        assert_eq!(r.displacement_norm, 0.0);
        assert_eq!(r.theta_pbrf, star);
        let scores = pbrf_influence(&spec, &r, &star, &data, 1e-8).unwrap();
        assert!(scores.values().all(|&s| s == 0.0));
    }

    #[test]
    fn same_seed_same_result() {
        let (spec, star, data) = fixture(ModelSpec::softmax_linear(3, 3).unwrap(), 40, 4);
        let cfg = PboConfig {
            epsilon: 1e-3,
            lambda_damp: 0.1,
            lr: 0.5,
            steps: 30,
            batch: BatchSource::Sampled { batch_size: 4 },
            seed: 11,
            eval_every: 10,
        };
        let a = pbrf_finetune(&spec, &star, data.get(1), &data, &cfg).unwrap();
        let b = pbrf_finetune(&spec, &star, data.get(1), &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pbo_trace.len(), 3);
    }

    #[test]
    fn linear_logits_match_ridge_closed_form() {
        let (spec, star, data) = fixture(ModelSpec::softmax_linear(4, 3).unwrap(), 80, 5);
        let data = Arc::new(data);
        let h = gnh_matrix_exact(&spec, &star, &data).unwrap();
        let lmax = crate::linalg::sym_eig(&h).unwrap().values[0];
        let lambda = 0.05 * lmax;
        let train = data.get(2).clone();
        let cfg = PboConfig {
            epsilon: 1e-8,
            lambda_damp: lambda,
            lr: 1.0 / (lmax + lambda),
            steps: (30.0 * (lmax + lambda) / lambda) as usize,
            batch: BatchSource::Full,
            seed: 0,
            eval_every: 0,
        };
        let r = pbrf_finetune(&spec, &star, &train, &data, &cfg).unwrap();
        let gl = loss_gradient(&spec, &star, &train).unwrap();
        let u = exact_ihvp(&h, lambda, &-gl.values).unwrap();
        let expected = &u * cfg.epsilon;
        assert!((&r.displacement - &expected).norm() <= 0.02 * expected.norm());

        let scores = pbrf_influence(&spec, &r, &star, &data, cfg.epsilon).unwrap();
        for (id, ex) in data.ids().iter().zip(data.examples()) {
            let exact = u.dot(&test_gradient(&spec, &star, ex).unwrap());
            assert!((scores[id] - exact).abs() <= 0.02 * exact.abs().max(1e-3), "{id}: {} vs {exact}", scores[id]);
        }

        // Doubling ε and the displacement together leaves the scores unchanged.
        let doubled = PbrfResult {
            theta_pbrf: star.with_values(&star.values + &r.displacement * 2.0).unwrap(),
            ..r.clone()
        };
        let again = pbrf_influence(&spec, &doubled, &star, &data, 2.0 * cfg.epsilon).unwrap();
        for (id, s) in &scores {
            assert!((again[id] - s).abs() <= 1e-3 * s.abs().max(1e-2));
        }
    }

    #[test]
    fn matched_batches_track_lissa() {
        let spec = ModelSpec::mlp(vec![3, 5, 2], Activation::Tanh).unwrap();
        let (spec, star, data) = fixture(spec, 60, 6);
        let data = Arc::new(data);
        let train = data.get(0).clone();
        let source = BatchSource::Sampled { batch_size: 8 };
        let op = GnhOperator::new(spec.clone(), star.clone(), data.clone(), source, HvpMode::Exact).unwrap();
        let lissa = LissaConfig::new(0.5, 0.1, 60, 21);
        let g = -loss_gradient(&spec, &star, &train).unwrap().values;
        let (u, _) = lissa_solve(&op, &g, &lissa).unwrap();
        let r = pbrf_finetune(&spec, &star, &train, &data, &PboConfig::matched(&lissa, source)).unwrap();
        let u_pbrf = &r.displacement / DEFAULT_EPSILON;
        assert!((&u_pbrf - &u).norm() <= 1e-4 * u.norm());
    }

    #[test]
    fn overflow_is_flagged() {
        let (spec, star, data) = fixture(ModelSpec::softmax_linear(3, 3).unwrap(), 40, 8);
        let cfg = PboConfig {
            epsilon: 1.0,
            lambda_damp: 1.0,
            lr: 1e300,
            steps: 20,
            batch: BatchSource::Full,
            seed: 0,
            eval_every: 0,
        };
        let r = pbrf_finetune(&spec, &star, data.get(0), &data, &cfg).unwrap();
        assert!(r.overflow);
        assert!(r.theta_pbrf.iter().all(|v| v.is_finite()));
        assert!(matches!(
            pbrf_influence(&spec, &r, &star, &data, 1.0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn comparison_basics() {
        let lissa: BTreeMap<usize, f64> = (0..12).map(|i| (i, (i as f64 - 5.5) * 0.3)).collect();
        let c = compare_influences(3, &lissa, &lissa).unwrap();
        assert_relative_eq!(c.pearson, 1.0, epsilon = 1e-12);
        assert_eq!(c.classify(&Thresholds::default()), Agreement::Agreeing);
        let doubled: BTreeMap<usize, f64> = lissa.iter().map(|(k, v)| (*k, 2.0 * v)).collect();
        let c = compare_influences(3, &lissa, &doubled).unwrap();
        assert_relative_eq!(c.pearson, 1.0, epsilon = 1e-12);
        assert_relative_eq!(c.slope, 2.0, epsilon = 1e-12);
        assert_eq!(c.classify(&Thresholds::default()), Agreement::Disagreeing);
        assert_eq!(c.rows[0].train_id, 3);

        let tiny: BTreeMap<usize, f64> = lissa.iter().map(|(k, v)| (*k, v * 1e-6)).collect();
        let c = compare_influences(0, &tiny, &tiny).unwrap();
        assert_eq!(c.classify(&Thresholds::default()), Agreement::NearZero);

        let mut other = lissa.clone();
        other.remove(&0);
        other.insert(99, 1.0);
        assert!(compare_influences(0, &lissa, &other).is_err());
        let few: BTreeMap<usize, f64> = (0..5).map(|i| (i, i as f64)).collect();
        assert!(compare_influences(0, &few, &few).is_err());
    }
}
