//! A sampler whose LiSSA iterates converge in mean but not in mean square.
//!
//! Inputs are `x = V s` with `s_j = √λ_j ε_j` and Rademacher `ε_j`, so
//! `‖x‖² = Tr(H)` pointwise, `E xxᵀ = H = V Λ Vᵀ` and the batch estimate
//! `H̃ = (1/|B|) Σ xxᵀ` satisfies `E H̃² = (1 − 1/|B|)H² + Tr(H)H/|B|`.
//!
//! With `g = 0` the second moment `E‖uᵗ‖² = u⁰ᵀ Rₜ u⁰` where `Rₜ` stays
//! diagonal in the eigenbasis. Writing `rₜ` for that diagonal,
//!
//! `rₜ[j] = (1 − η(λ_j + λ))² rₜ₋₁[j] + (η²/|B|) λ_j (Σ_i λ_i rₜ₋₁[i] − λ_j rₜ₋₁[j])`,
//!
//! because `E[xxᵀ R xxᵀ] = Tr(HR) H` for diagonal `R`. When all eigenvalues
//! are equal this collapses to `rₜ = rᵗ` with the per-direction factor
//! `r_j = (1 − η(λ_j + λ))² + η²(Tr(H)λ_j − λ_j²)/|B|`; for unequal
//! eigenvalues the rank-one coupling matters and the power formula
//! `Σ c_j² r_jᵗ` is only an approximation (reported as [`CounterExample::power_moments`]).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{lissa_solve, LissaConfig, MeanIterateError};
use crate::error::{Error, Result};
use crate::linalg::{random_orthogonal, sym_eig, DenseMatrix, DenseVector};
use crate::operator::{check_dim, StochasticHvp};
use crate::rng::SeededRng;
use crate::stats::MeanSe;

#[derive(Clone, Debug, PartialEq)]
pub struct CounterExample {
    /// Eigenvalues of `H`.
    pub eigenvalues: DenseVector,
    /// Orthogonal rotation; column `j` pairs with `eigenvalues[j]`.
    pub v: DenseMatrix,
    pub batch_size: usize,
    pub lambda_damp: f64,
    pub eta: f64,
    /// Defaults to the eigenvector of the largest eigenvalue.
    pub u0: DenseVector,
}

impl CounterExample {
    /// The rotation is drawn from `seed`.
    pub fn build(
        n: usize,
        eigenvalues: &[f64],
        batch_size: usize,
        lambda_damp: f64,
        eta: f64,
        seed: u64,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyDimension("counter-example"));
        }
        if eigenvalues.len() != n {
            return Err(Error::mismatch("counter-example eigenvalues", n, eigenvalues.len()));
        }
        if eigenvalues.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::invalid("eigenvalues must be finite and ≥ 0"));
        }
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(eta > 0.0) || !(lambda_damp >= 0.0) {
            return Err(Error::invalid("need η > 0 and λ ≥ 0"));
        }
        let v = random_orthogonal(n, &mut SeededRng::for_component(seed, "counterexample-rotation"))?;
        let eigenvalues = DenseVector::from_column_slice(eigenvalues);
        let top = eigenvalues.argmax().0;
        let u0 = v.column(top).into_owned();
        Ok(Self {
            eigenvalues,
            v,
            batch_size,
            lambda_damp,
            eta,
            u0,
        })
    }

    pub fn with_u0(mut self, u0: DenseVector) -> Result<Self> {
        if u0.len() != self.dim() {
            return Err(Error::mismatch("counter-example u0", self.dim(), u0.len()));
        }
        self.u0 = u0;
        Ok(self)
    }

    pub fn with_batch_size(&self, batch_size: usize) -> Self {
        Self {
            batch_size,
            ..self.clone()
        }
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.sum()
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.max()
    }

    /// `H = V Λ Vᵀ`.
    pub fn hessian(&self) -> DenseMatrix {
        let h = &self.v * DenseMatrix::from_diagonal(&self.eigenvalues) * self.v.transpose();
        crate::linalg::symmetrize(&h)
    }

    /// Exact `E H̃² − H² = (Tr(H) H − H²)/|B|`.
    pub fn second_moment_gap(&self) -> DenseMatrix {
        let tr = self.trace();
        let d = self.eigenvalues.map(|l| (tr * l - l * l) / self.batch_size as f64);
        crate::linalg::symmetrize(&(&self.v * DenseMatrix::from_diagonal(&d) * self.v.transpose()))
    }

    /// Batch sizes at or below `(λ_max/(λ_max + λ))² Tr(H)/λ_max` admit a
    /// step size with a second-moment factor ≥ 1.
    pub fn divergence_threshold(&self) -> f64 {
        let lmax = self.lambda_max();
        (lmax / (lmax + self.lambda_damp)).powi(2) * self.trace() / lmax
    }

    pub fn below_divergence_threshold(&self) -> bool {
        self.batch_size as f64 <= self.divergence_threshold()
    }

    /// Diagonal of `R = (1 − η(H + λ))² + η²(Tr(H)H − H²)/|B|` in the eigenbasis.
    pub fn r_diagonal(&self) -> DenseVector {
        let tr = self.trace();
        let (eta, lam, b) = (self.eta, self.lambda_damp, self.batch_size as f64);
        self.eigenvalues
            .map(|l| (1.0 - eta * (l + lam)).powi(2) + eta * eta * (tr * l - l * l) / b)
    }

    /// The symmetric matrix `M` with `rₜ = M rₜ₋₁`.
    pub fn moment_matrix(&self) -> DenseMatrix {
        let (eta, lam, b) = (self.eta, self.lambda_damp, self.batch_size as f64);
        let l = &self.eigenvalues;
        let mut m = l * l.transpose() * (eta * eta / b);
        for j in 0..l.len() {
            m[(j, j)] += (1.0 - eta * (l[j] + lam)).powi(2) - eta * eta * l[j] * l[j] / b;
        }
        m
    }

    /// Largest eigenvalue of [`CounterExample::moment_matrix`]: the asymptotic
    /// per-step growth of `E‖uᵗ‖²`.
    pub fn growth_factor(&self) -> Result<f64> {
        Ok(sym_eig(&self.moment_matrix())?.values[0])
    }

    fn coefficients_sq(&self, u0: &DenseVector) -> Result<DenseVector> {
        check_dim(self.dim(), u0)?;
        Ok(self.v.tr_mul(u0).map(|c| c * c))
    }

    /// Exact `E‖uᵗ‖²` for `g = 0`.
    pub fn moments(&self, u0: &DenseVector, t: usize) -> Result<f64> {
        let c2 = self.coefficients_sq(u0)?;
        let m = self.moment_matrix();
        let mut r = DenseVector::repeat(self.dim(), 1.0);
        for _ in 0..t {
            r = &m * r;
        }
        Ok(c2.dot(&r))
    }

    /// `u⁰ᵀ Rᵗ u⁰ = Σ c_j² r_jᵗ`, exact only for equal eigenvalues.
    pub fn power_moments(&self, u0: &DenseVector, t: usize) -> Result<f64> {
        let c2 = self.coefficients_sq(u0)?;
        Ok(c2.dot(&self.r_diagonal().map(|r| r.powi(t as i32))))
    }

    /// Draws one input `x = V s`.
    pub fn sample_input(&self, rng: &mut SeededRng) -> DenseVector {
        let s = DenseVector::from_iterator(
            self.dim(),
            self.eigenvalues.iter().map(|l| l.sqrt() * rng.rademacher()),
        );
        &self.v * s
    }

    /// Runs `runs` LiSSA solves with `g = 0` from `u0` and compares the
    /// Monte-Carlo second moment with the closed forms at `t = 0..=t_max`.
    pub fn simulate(&self, runs: usize, t_max: usize, seed: u64) -> Result<Vec<MomentRow>> {
        if runs < 2 || t_max == 0 {
            return Err(Error::invalid("need at least 2 runs and 1 step"));
        }
        let n = self.dim();
        let g = DenseVector::zeros(n);
        let base = SeededRng::for_component(seed, "counterexample-runs");
        let cfg = LissaConfig {
            u0: Some(self.u0.clone()),
            snapshot_every: 1,
            ..LissaConfig::new(self.eta, self.lambda_damp, t_max, 0)
        };
        let paths: Vec<Vec<DenseVector>> = (0..runs as u64)
            .into_par_iter()
            .map(|r| {
                let c = LissaConfig {
                    seed: base.substream(r).next_u64(),
                    ..cfg.clone()
                };
                let (_, trace) = lissa_solve(self, &g, &c)?;
                Ok(trace.snapshots.into_iter().map(|(_, u)| u).collect())
            })
            .collect::<Result<_>>()?;
        let u0_sq = self.u0.norm_squared();
        let mut rows = vec![MomentRow {
            step: 0,
            monte_carlo: MeanSe {
                mean: u0_sq,
                se: 0.0,
                n: runs,
            },
            exact: u0_sq,
            power: u0_sq,
            mean_iterate: MeanIterateError {
                step: 0,
                error: self.u0.norm(),
                bound: self.u0.norm(),
                mc_se: 0.0,
            },
        }];
        let m = runs as f64;
        for t in 1..=t_max {
            let sq: Vec<f64> = paths.iter().map(|p| p[t - 1].norm_squared()).collect();
            let mean = paths.iter().fold(DenseVector::zeros(n), |a, p| a + &p[t - 1]) / m;
            let var_sum: f64 = paths.iter().map(|p| (&p[t - 1] - &mean).norm_squared()).sum::<f64>() / (m - 1.0);
            rows.push(MomentRow {
                step: t,
                monte_carlo: MeanSe::from_samples(&sq)?,
                exact: self.moments(&self.u0, t)?,
                power: self.power_moments(&self.u0, t)?,
                mean_iterate: MeanIterateError {
                    step: t,
                    error: mean.norm(),
                    bound: (1.0 - self.lambda_damp * self.eta).powi(t as i32) * self.u0.norm(),
                    mc_se: (var_sum / m).sqrt(),
                },
            });
        }
        Ok(rows)
    }
}

/// Closed-form vs Monte-Carlo second moment at one step (`u⋆ = 0`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub step: usize,
    pub monte_carlo: MeanSe,
    pub exact: f64,
    pub power: f64,
    pub mean_iterate: MeanIterateError,
}

impl MomentRow {
    pub fn relative_error(&self) -> f64 {
        (self.monte_carlo.mean - self.exact).abs() / self.exact
    }
}

impl StochasticHvp for CounterExample {
    fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `(1/|B|) Σ x (xᵀu)` over a fresh batch.
    fn hvp(&self, u: &DenseVector, rng: &mut SeededRng) -> Result<DenseVector> {
        check_dim(self.dim(), u)?;
        let mut acc = DenseVector::zeros(self.dim());
        for _ in 0..self.batch_size {
            let x = self.sample_input(rng);
            let xu = x.dot(u);
            acc.axpy(xu, &x, 1.0);
        }
        Ok(acc / self.batch_size as f64)
    }
}
