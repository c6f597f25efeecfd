//! Dense linear algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type DenseMatrix = DMatrix<f64>;
pub type DenseVector = DVector<f64>;

/// Relative tolerance for symmetry checks, scaled by `max |M|`.
pub const SYMMETRY_TOL: f64 = 1e-12;

pub fn max_abs(m: &DenseMatrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn is_symmetric(m: &DenseMatrix, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let tol = rel_tol * max_abs(m);
    let n = m.nrows();
    (0..n).all(|i| (i + 1..n).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DenseMatrix) -> DenseMatrix {
    (m + m.transpose()) * 0.5
}

#[derive(Clone, Debug)]
pub struct SymEigen {
    /// Sorted in descending order.
    pub values: DenseVector,
    /// Orthonormal columns, column `j` pairs with `values[j]`.
    pub vectors: DenseMatrix,
}

/// Symmetric eigendecomposition with eigenvalues sorted descending.
pub fn sym_eig(m: &DenseMatrix) -> Result<SymEigen> {
    if !m.is_square() {
        return Err(Error::Contract(format!(
            "sym_eig needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Err(Error::EmptyDimension("sym_eig"));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("sym_eig input".into()));
    }
    if !is_symmetric(m, SYMMETRY_TOL) {
        return Err(Error::Contract("sym_eig input is not symmetric".into()));
    }
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DenseVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymEigen { values, vectors })
}

/// Solves `(H + λI) u = g` for symmetric positive (semi)definite `H`.
///
/// Uses a Cholesky factorisation and falls back to LU when the shifted matrix
/// is not numerically positive definite.
pub fn solve_shifted(h: &DenseMatrix, lambda: f64, g: &DenseVector) -> Result<DenseVector> {
    let n = h.nrows();
    if !h.is_square() {
        return Err(Error::Contract("solve_shifted needs a square matrix".into()));
    }
    if g.len() != n {
        return Err(Error::mismatch("solve_shifted", n, g.len()));
    }
    let mut a = h.clone();
    for i in 0..n {
        a[(i, i)] += lambda;
    }
    if let Some(chol) = a.clone().cholesky() {
        let u = chol.solve(g);
        if u.iter().all(|x| x.is_finite()) {
            return Ok(u);
        }
    }
    let lu = a.lu();
    lu.solve(g)
        .filter(|u| u.iter().all(|x| x.is_finite()))
        .ok_or_else(|| Error::Singular(format!("(H + {lambda}I) is singular")))
}

/// Pairwise (cascade) summation of `n` vectors produced on demand by `term`.
///
/// The reduction tree depends only on `n`, so results do not depend on how
/// the terms are scheduled.
pub fn pairwise_sum<F>(n: usize, dim: usize, term: &F) -> DenseVector
where
    F: Fn(usize) -> DenseVector,
{
    fn go<F: Fn(usize) -> DenseVector>(lo: usize, hi: usize, dim: usize, term: &F) -> DenseVector {
        const LEAF: usize = 8;
        if hi - lo <= LEAF {
            let mut acc = DenseVector::zeros(dim);
            for i in lo..hi {
                acc += term(i);
            }
            acc
        } else {
            let mid = lo + (hi - lo) / 2;
            go(lo, mid, dim, term) + go(mid, hi, dim, term)
        }
    }
    if n == 0 {
        return DenseVector::zeros(dim);
    }
    go(0, n, dim, term)
}

/// Pairwise summation of scalars.
pub fn pairwise_sum_scalars(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum_scalars(&xs[..mid]) + pairwise_sum_scalars(&xs[mid..])
}

/// Random matrix with orthonormal columns, from the QR factor of a Gaussian matrix.
pub fn random_orthogonal(n: usize, rng: &mut crate::rng::SeededRng) -> Result<DenseMatrix> {
    let g = DenseMatrix::from_vec(n, n, rng.gaussian_vector(n * n, 1.0)?.data.into());
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    // Fix column signs so the result is a deterministic function of `g`.
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            let mut col = q.column_mut(j);
            col *= -1.0;
        }
    }
    Ok(q)
}

/// Random symmetric PSD matrix `A Aᵀ / n` with `A` Gaussian `n × rank`.
pub fn random_psd(n: usize, rank: usize, rng: &mut crate::rng::SeededRng) -> Result<DenseMatrix> {
    let a = DenseMatrix::from_vec(n, rank, rng.gaussian_vector(n * rank, 1.0)?.data.into());
    Ok(symmetrize(&(&a * a.transpose() / n as f64)))
}
