//! Kernel ridge regression and its ridgeless (minimum-norm) limit.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, VllError};
use crate::kernels::{GramKernel, Provenance};
use crate::linalg::{cholesky_solve, pinv_solve};

/// Relative eigenvalue cutoff of the ridgeless path.
pub const PINV_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelFit {
    pub dual_coefficients: DVector<f64>,
    pub ridge_lambda: f64,
    pub train_ids: Vec<u64>,
    pub kernel_provenance: Provenance,
}

/// Duals of `(K + ridge I) c = y`. Ridge 0 takes the pseudo-inverse path.
pub fn solve_duals(k: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    if !k.is_square() || k.nrows() != y.len() {
        return Err(VllError::Shape(format!("kernel {}x{} vs {} targets", k.nrows(), k.ncols(), y.len())));
    }
    if !(ridge >= 0.0) {
        return Err(VllError::InvalidConfig(format!("ridge must be non-negative, got {ridge}")));
    }
    if !k.iter().chain(y.iter()).all(|v| v.is_finite()) {
        return Err(VllError::NonFinite("regression inputs"));
    }
    let duals = if ridge == 0.0 {
        let (x, rank) = pinv_solve(k, y, PINV_REL_TOL);
        if rank == 0 {
            return Err(VllError::DegenerateKernel);
        }
        x
    } else {
        match cholesky_solve(k, ridge, y) {
            Some(x) => x,
            None => spectral_ridge(k, y, ridge),
        }
    };
    if !duals.iter().all(|v| v.is_finite()) {
        return Err(VllError::NonFinite("dual coefficients"));
    }
    Ok(duals)
}

/// (K + λI)⁻¹y through the eigendecomposition; the reference path.
pub fn spectral_ridge(k: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> DVector<f64> {
    let (vals, vecs) = crate::linalg::sym_eigen_desc(k);
    let mut x = DVector::zeros(k.nrows());
    for (j, &v) in vals.iter().enumerate() {
        let u = vecs.column(j);
        x.axpy(u.dot(y) / (v.max(0.0) + ridge), &u, 1.0);
    }
    x
}

pub fn fit(k_train: &GramKernel, y: &DVector<f64>, ridge_lambda: f64) -> Result<KernelFit> {
    if !k_train.is_square() {
        return Err(VllError::Shape("training kernel must be square".into()));
    }
    Ok(KernelFit {
        dual_coefficients: solve_duals(&k_train.matrix, y, ridge_lambda)?,
        ridge_lambda,
        train_ids: k_train.point_ids.clone(),
        kernel_provenance: k_train.provenance,
    })
}

/// k_cross · duals, with `k_cross` test×train.
pub fn predict(fit: &KernelFit, k_cross: &DMatrix<f64>) -> Result<DVector<f64>> {
    if k_cross.ncols() != fit.dual_coefficients.len() {
        return Err(VllError::Shape(format!(
            "cross kernel has {} columns, fit has {} training points",
            k_cross.ncols(),
            fit.dual_coefficients.len()
        )));
    }
    Ok(k_cross * &fit.dual_coefficients)
}

/// Mean squared difference.
pub fn gen_error(predictions: &DVector<f64>, targets: &DVector<f64>) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(VllError::Shape(format!("{} predictions vs {} targets", predictions.len(), targets.len())));
    }
    if targets.is_empty() {
        return Err(VllError::InvalidConfig("empty evaluation set".into()));
    }
    Ok((predictions - targets).norm_squared() / targets.len() as f64)
}

/// Coefficient of determination of `pred` against `reference`.
pub fn r_squared(pred: &DVector<f64>, reference: &DVector<f64>) -> Result<f64> {
    let mse = gen_error(pred, reference)?;
    let mean = reference.mean();
    let var = reference.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / reference.len() as f64;
    if var == 0.0 {
        return Err(VllError::InvalidConfig("reference has zero variance".into()));
    }
    Ok(1.0 - mse / var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_dual() {
        let k = DMatrix::from_element(1, 1, 4.0);
        let d = solve_duals(&k, &DVector::from_element(1, 2.0), 0.0).unwrap();
        assert_eq!(d[0], 0.5);
    }

    #[test]
    fn two_point_error() {
        let e = gen_error(&DVector::from_vec(vec![0.0, 2.0]), &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(e, 1.0);
    }

    #[test]
    fn zero_kernel_is_degenerate() {
        let r = solve_duals(&DMatrix::zeros(2, 2), &DVector::from_element(2, 1.0), 0.0);
        assert!(matches!(r, Err(VllError::DegenerateKernel)));
    }
}
