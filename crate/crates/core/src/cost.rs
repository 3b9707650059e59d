//! Normalized cost (distortion) matrices.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Nonnegative K×K cost matrix with zero diagonal and unit off-diagonal mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rho: DMatrix<f64>,
}

impl CostMatrix {
    /// Zeroes the diagonal and rescales so the off-diagonal mean is 1.
    pub fn normalized(mut rho: DMatrix<f64>) -> Result<Self> {
        let k = rho.nrows();
        if k < 2 || rho.ncols() != k {
            return Err(Error::InvalidArgument(format!(
                "cost matrix must be square with K >= 2, got {}x{}",
                rho.nrows(),
                rho.ncols()
            )));
        }
        if rho.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "cost entries must be finite and nonnegative".into(),
            ));
        }
        for i in 0..k {
            rho[(i, i)] = 0.0;
        }
        let mean = off_diagonal_mean(&rho);
        if mean <= 0.0 {
            return Err(Error::InvalidArgument(
                "cost matrix has no positive off-diagonal entry".into(),
            ));
        }
        rho /= mean;
        Ok(Self { rho })
    }

    /// 0-1 (Hamming) cost; already normalized.
    pub fn zero_one(k: usize) -> Self {
        let mut rho = DMatrix::from_element(k, k, 1.0);
        rho.fill_diagonal(0.0);
        Self { rho }
    }

    pub fn k(&self) -> usize {
        self.rho.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rho
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.rho
    }

    /// Off-diagonal entries in row-major order.
    pub fn off_diagonal(&self) -> Vec<f64> {
        off_diagonal(&self.rho)
    }

    /// Simultaneous row/column permutation: new(i, j) = old(perm[i], perm[j]).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.k();
        Self {
            rho: DMatrix::from_fn(k, k, |i, j| self.rho[(perm[i], perm[j])]),
        }
    }
}

pub fn off_diagonal(m: &DMatrix<f64>) -> Vec<f64> {
    let k = m.nrows();
    let mut out = Vec::with_capacity(k * k.saturating_sub(1));
    for i in 0..k {
        for j in 0..k {
            if i != j {
                out.push(m[(i, j)]);
            }
        }
    }
    out
}

pub fn off_diagonal_mean(m: &DMatrix<f64>) -> f64 {
    let v = off_diagonal(m);
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_invariants() {
        let m = DMatrix::from_row_slice(3, 3, &[5.0, 1.0, 2.0, 3.0, 9.0, 4.0, 5.0, 6.0, 1.0]);
        let c = CostMatrix::normalized(m).unwrap();
        for i in 0..3 {
            assert_eq!(c.matrix()[(i, i)], 0.0);
        }
        assert!((off_diagonal_mean(c.matrix()) - 1.0).abs() < 1e-12);
        // ratios preserved
        assert!((c.matrix()[(0, 2)] / c.matrix()[(0, 1)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(CostMatrix::normalized(DMatrix::zeros(3, 3)).is_err());
        assert!(CostMatrix::normalized(DMatrix::from_element(2, 2, -1.0)).is_err());
        assert!(CostMatrix::normalized(DMatrix::from_element(1, 1, 1.0)).is_err());
    }

    #[test]
    fn zero_one_is_normalized() {
        let c = CostMatrix::zero_one(5);
        assert_eq!(off_diagonal_mean(c.matrix()), 1.0);
    }
}
