//! Implicit symmetric operators `u ↦ H̃u`.

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::rng::SeededRng;

/// A (possibly stochastic) symmetric PSD operator.
///
/// Every call to [`StochasticHvp::hvp`] applies a fresh, independent draw
/// `H̃` whose expectation is the target `H`; deterministic operators ignore
/// the rng.
pub trait StochasticHvp: Sync {
    fn dim(&self) -> usize;

    fn hvp(&self, u: &DenseVector, rng: &mut SeededRng) -> Result<DenseVector>;

    /// True when `hvp` does not depend on the rng.
    fn is_deterministic(&self) -> bool {
        false
    }
}

impl<T: StochasticHvp + ?Sized> StochasticHvp for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn hvp(&self, u: &DenseVector, rng: &mut SeededRng) -> Result<DenseVector> {
        (**self).hvp(u, rng)
    }
    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}

pub(crate) fn check_dim(op_dim: usize, u: &DenseVector) -> Result<()> {
    if u.len() != op_dim {
        return Err(Error::mismatch("operator input", op_dim, u.len()));
    }
    Ok(())
}

/// Deterministic operator backed by an explicit matrix.
#[derive(Clone, Debug)]
pub struct DenseOperator {
    pub matrix: DenseMatrix,
}

impl DenseOperator {
    pub fn new(matrix: DenseMatrix) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::Contract("operator matrix must be square".into()));
        }
        if matrix.nrows() == 0 {
            return Err(Error::EmptyDimension("operator"));
        }
        Ok(Self { matrix })
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::new(DenseMatrix::identity(n, n))
    }

    pub fn diagonal(d: &[f64]) -> Result<Self> {
        Self::new(DenseMatrix::from_diagonal(&DenseVector::from_column_slice(d)))
    }
}

impl StochasticHvp for DenseOperator {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn hvp(&self, u: &DenseVector, _rng: &mut SeededRng) -> Result<DenseVector> {
        check_dim(self.dim(), u)?;
        Ok(&self.matrix * u)
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_operator_applies_matrix() {
        let op = DenseOperator::diagonal(&[1.0, 2.0]).unwrap();
        let u = DenseVector::from_vec(vec![3.0, 4.0]);
        let v = op.hvp(&u, &mut SeededRng::new(0)).unwrap();
        assert_eq!(v.as_slice(), &[3.0, 8.0]);
        assert!(op.hvp(&DenseVector::zeros(3), &mut SeededRng::new(0)).is_err());
    }
}
