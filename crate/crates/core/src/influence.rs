//! Influence scores, gradient/influence similarity and the eigenbasis view
//! of damping.
//!
//! Scores follow one sign convention everywhere: `⟨u, ∇ log p(test)⟩` with
//! `(H + λ)u = −∇ℓ(train)`.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve_shifted, sym_eig, DenseMatrix, DenseVector};
use crate::models::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Lissa,
    Exact,
    Pbrf,
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub train_id: usize,
    pub test_id: usize,
    pub score: f64,
    pub method: Method,
    #[serde(default)]
    pub overflow: bool,
}

impl InfluenceRecord {
    /// A non-finite score is kept and flagged rather than dropped.
    pub fn new(train_id: usize, test_id: usize, score: f64, method: Method) -> Self {
        Self {
            train_id,
            test_id,
            score,
            method,
            overflow: !score.is_finite(),
        }
    }
}

/// `⟨u_train, ∇f(test)⟩`.
pub fn influence_score(u_train: &ParamVector, test_grad: &ParamVector) -> Result<f64> {
    if u_train.len() != test_grad.len() {
        return Err(Error::mismatch("influence score", u_train.len(), test_grad.len()));
    }
    Ok(u_train.dot(test_grad))
}

pub fn write_records(path: &Path, records: &[InfluenceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityKind {
    Gradient,
    Influence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: DenseMatrix,
    pub labels: Vec<String>,
    pub kind: SimilarityKind,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Element-wise `self − other` on identical labels.
    pub fn difference(&self, other: &SimilarityMatrix) -> Result<DenseMatrix> {
        if self.labels != other.labels {
            return Err(Error::invalid("similarity matrices have different labels"));
        }
        Ok(&self.values - &other.values)
    }

    /// Median of the strictly upper-triangular entries.
    pub fn median_off_diagonal(&self) -> Option<f64> {
        let n = self.len();
        let mut v: Vec<f64> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| self.values[(i, j)])
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_labeled_matrix(path, &self.labels, &self.values)
    }
}

/// CSV with a leading `label` column and one column per label.
pub fn write_labeled_matrix(path: &Path, labels: &[String], m: &DenseMatrix) -> Result<()> {
    if m.nrows() != labels.len() || m.ncols() != labels.len() {
        return Err(Error::mismatch("labeled matrix", labels.len(), m.nrows()));
    }
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(std::fs::File::create(path)?));
    let mut header = vec!["label".to_string()];
    header.extend(labels.iter().cloned());
    w.write_record(&header)?;
    for (i, label) in labels.iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend((0..labels.len()).map(|j| format!("{:e}", m[(i, j)])));
        w.write_record(&row)?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(e.into_error()))?
        .flush()?;
    Ok(())
}

/// Solver for `(H + λ)⁻¹ g`.
pub trait IhvpSolver: Sync {
    fn solve(&self, g: &DenseVector) -> Result<DenseVector>;
}

impl<F> IhvpSolver for F
where
    F: Fn(&DenseVector) -> Result<DenseVector> + Sync,
{
    fn solve(&self, g: &DenseVector) -> Result<DenseVector> {
        self(g)
    }
}

/// Dense `(H + λI)⁻¹` solver.
#[derive(Clone, Debug)]
pub struct DenseSolver {
    pub h: DenseMatrix,
    pub lambda_damp: f64,
}

impl IhvpSolver for DenseSolver {
    fn solve(&self, g: &DenseVector) -> Result<DenseVector> {
        solve_shifted(&self.h, self.lambda_damp, g)
    }
}

/// Cosine similarities of raw gradients, or of gradients in the
/// `(H + λ)⁻¹` inner product. One solve per item.
pub fn similarity_matrix(
    grads: &[DenseVector],
    labels: Vec<String>,
    kind: SimilarityKind,
    solver: Option<&dyn IhvpSolver>,
) -> Result<SimilarityMatrix> {
    let n = grads.len();
    if n == 0 {
        return Err(Error::EmptyDimension("similarity items"));
    }
    if labels.len() != n {
        return Err(Error::mismatch("similarity labels", n, labels.len()));
    }
    let dim = grads[0].len();
    if let Some(g) = grads.iter().find(|g| g.len() != dim) {
        return Err(Error::mismatch("similarity gradients", dim, g.len()));
    }
    if grads.iter().any(|g| g.norm() == 0.0) {
        return Err(Error::invalid("zero-norm gradient has no similarity"));
    }
    let solved: Vec<DenseVector> = match kind {
        SimilarityKind::Gradient => grads.to_vec(),
        SimilarityKind::Influence => {
            let solver = solver.ok_or_else(|| Error::invalid("influence similarity needs a solver"))?;
            grads.par_iter().map(|g| solver.solve(g)).collect::<Result<_>>()?
        }
    };
    let mut gram = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            // Symmetrize the two bilinear evaluations so an inexact solver
            // still yields a symmetric matrix.
            let v = 0.5 * (grads[i].dot(&solved[j]) + grads[j].dot(&solved[i]));
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let mut values = DenseMatrix::zeros(n, n);
    for i in 0..n {
        if !(gram[(i, i)] > 0.0) {
            return Err(Error::invalid(format!("item {i} has non-positive self-similarity")));
        }
        for j in 0..n {
            values[(i, j)] = if i == j {
                1.0
            } else {
                gram[(i, j)] / (gram[(i, i)].sqrt() * gram[(j, j)].sqrt())
            };
        }
    }
    Ok(SimilarityMatrix { values, labels, kind })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReweightTerm {
    pub eigenvalue: f64,
    /// `⟨g, v_j⟩`.
    pub coefficient: f64,
    /// `λ/(λ_j + λ)`.
    pub weight: f64,
}

/// Coefficients of `g` in the eigenbasis of `H` with their damping weights,
/// in descending eigenvalue order. Returns the eigenvectors as columns too.
pub fn eigen_reweight(g: &DenseVector, h: &DenseMatrix, lambda_damp: f64) -> Result<(Vec<ReweightTerm>, DenseMatrix)> {
    if h.nrows() != g.len() {
        return Err(Error::mismatch("eigen_reweight", h.nrows(), g.len()));
    }
    if !(lambda_damp > 0.0) {
        return Err(Error::invalid("eigen_reweight needs λ > 0"));
    }
    let eig = sym_eig(h)?;
    let coeffs = eig.vectors.tr_mul(g);
    let terms = eig
        .values
        .iter()
        .zip(coeffs.iter())
        .map(|(&l, &c)| ReweightTerm {
            eigenvalue: l,
            coefficient: c,
            weight: lambda_damp / (l.max(0.0) + lambda_damp),
        })
        .collect();
    Ok((terms, eig.vectors))
}

/// `Σ_j weight_j ⟨g, v_j⟩ v_j`, which equals `λ(H + λ)⁻¹ g`.
pub fn reconstruct(terms: &[ReweightTerm], vectors: &DenseMatrix) -> Result<DenseVector> {
    if vectors.ncols() != terms.len() {
        return Err(Error::mismatch("reweight reconstruction", vectors.ncols(), terms.len()));
    }
    let w = DenseVector::from_iterator(terms.len(), terms.iter().map(|t| t.weight * t.coefficient));
    Ok(vectors * w)
}
