//! Saddle-point learning curves for the Gaussian covariate model
//! ψ = Aψ_M + ε, y = ψ_M·w*/√M, plus a Monte Carlo oracle over the same model.
//!
//! Traces are normalized by M throughout (`tr = Tr / M`), which keeps every order
//! parameter intensive as M grows.

mod fixed_a;
mod mc;
mod quenched;
mod toy;

pub use fixed_a::{irreducible_error, irreducible_error_with_matrix, solve_fixed_a, solve_fixed_a_opts, solve_fixed_a_with_matrix};
pub use mc::{mc_learning_curve, population_error};
pub use quenched::{quenched_derivatives_general, solve_quenched_gaussian_a, solve_quenched_gaussian_a_opts};
pub use toy::{build_toy, ntk_grid_spectrum, Amplification, SpectrumSource, ToyModel};

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VllError};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ASpec {
    Identity,
    Diagonal { scales: Vec<f64> },
    Projection { keep_top: usize },
    Gaussian { sigma_a: f64, eta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralModel {
    /// Eigenvalues of Σ_M, non-increasing.
    pub sigma_m_eigs: Vec<f64>,
    /// Target coefficients in the Σ_M eigenbasis.
    pub wstar: Vec<f64>,
    /// Eigenvalues of Σ_ε in the student feature basis.
    pub noise_eigs: Vec<f64>,
    pub a_spec: ASpec,
    pub m: usize,
    pub n_h: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaddleSolution {
    pub q: f64,
    pub q_hat: f64,
    pub gamma: f64,
    pub v: Option<f64>,
    pub v_hat: Option<f64>,
    pub d_q_hat: Option<f64>,
    pub d_v_hat: Option<f64>,
    pub eg: f64,
    pub iterations: usize,
    pub residual: f64,
    /// Ridge actually used; differs from the request when a ridgeless proxy was substituted.
    pub ridge: f64,
    /// γ ≥ 1: the (1−γ)⁻¹ prefactor diverges and `eg` is not meaningful.
    pub divergent: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { damping: 0.5, tol: 1e-12, max_iter: 100_000 }
    }
}

impl SpectralModel {
    pub fn new(
        sigma_m_eigs: Vec<f64>,
        wstar: Vec<f64>,
        noise_eigs: Vec<f64>,
        a_spec: ASpec,
    ) -> Result<Self> {
        let m = sigma_m_eigs.len();
        let n_h = noise_eigs.len();
        let model = Self { sigma_m_eigs, wstar, noise_eigs, a_spec, m, n_h };
        model.validate()?;
        Ok(model)
    }

    /// Σ_M = I_M, A = I, no noise.
    pub fn isotropic(m: usize, wstar: Vec<f64>) -> Result<Self> {
        Self::new(vec![1.0; m], wstar, vec![0.0; m], ASpec::Identity)
    }

    /// λ_k = k^{-exponent}, k = 1..M, identity feature map, no noise.
    pub fn power_law(m: usize, exponent: f64, wstar: Vec<f64>) -> Result<Self> {
        let eigs = (1..=m).map(|k| (k as f64).powf(-exponent)).collect();
        Self::new(eigs, wstar, vec![0.0; m], ASpec::Identity)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(VllError::InvalidModel(s));
        if self.m == 0 || self.n_h == 0 {
            return bad("M and N_H must be positive".into());
        }
        if self.sigma_m_eigs.len() != self.m || self.wstar.len() != self.m {
            return bad(format!(
                "Σ_M has {} eigenvalues and w* has {} entries; both must equal M = {}",
                self.sigma_m_eigs.len(),
                self.wstar.len(),
                self.m
            ));
        }
        if self.noise_eigs.len() != self.n_h {
            return bad("noise spectrum length must equal N_H".into());
        }
        if self.sigma_m_eigs.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return bad("Σ_M eigenvalues must be positive and finite".into());
        }
        if self.sigma_m_eigs.windows(2).any(|w| w[1] > w[0]) {
            return bad("Σ_M eigenvalues must be sorted non-increasing".into());
        }
        if self.noise_eigs.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("noise eigenvalues must be non-negative and finite".into());
        }
        if self.wstar.iter().any(|v| !v.is_finite()) {
            return bad("w* must be finite".into());
        }
        match &self.a_spec {
            ASpec::Identity => {
                if self.n_h != self.m {
                    return bad("identity feature map needs N_H = M".into());
                }
            }
            ASpec::Diagonal { scales } => {
                if self.n_h > self.m || scales.len() != self.n_h {
                    return bad("diagonal map needs N_H <= M and N_H scales".into());
                }
            }
            ASpec::Projection { keep_top } => {
                if *keep_top > self.m {
                    return bad(format!("keep_top = {keep_top} exceeds M = {}", self.m));
                }
                if *keep_top != self.n_h {
                    return bad("projection map needs N_H = keep_top".into());
                }
            }
            ASpec::Gaussian { sigma_a, eta } => {
                if !(*sigma_a > 0.0) {
                    return bad("Gaussian map needs sigma_a > 0".into());
                }
                let ratio = self.n_h as f64 / self.m as f64;
                if !(*eta > 0.0) || (eta - ratio).abs() > 1e-9 * ratio.max(1.0) {
                    return bad(format!("eta = {eta} must equal N_H/M = {ratio}"));
                }
            }
        }
        Ok(())
    }

    pub fn is_structured(&self) -> bool {
        !matches!(self.a_spec, ASpec::Gaussian { .. })
    }

    /// Scale with which student feature `i` sees teacher mode `i` (structured maps only).
    pub(crate) fn coupling(&self, i: usize) -> f64 {
        match &self.a_spec {
            ASpec::Identity => 1.0,
            ASpec::Diagonal { scales } => scales[i],
            ASpec::Projection { .. } => 1.0,
            ASpec::Gaussian { .. } => unreachable!("Gaussian map has no diagonal coupling"),
        }
    }

    /// (1/M) w*ᵀ Σ_M w*: the error of the zero predictor.
    pub fn prior_error(&self) -> f64 {
        self.sigma_m_eigs.iter().zip(&self.wstar).map(|(l, w)| l * w * w).sum::<f64>() / self.m as f64
    }

    /// The N_H×M matrix A with ψ = Aψ_M + ε. The Gaussian spec draws a fresh
    /// instance with entries N(0, σ²)/√N_H.
    pub fn feature_matrix(&self, r: &mut Rng) -> DMatrix<f64> {
        let (nh, m) = (self.n_h, self.m);
        match &self.a_spec {
            ASpec::Gaussian { sigma_a, .. } => {
                let s = sigma_a / (nh as f64).sqrt();
                let mut a = DMatrix::zeros(nh, m);
                // column-major fill keeps the draw order fixed
                for j in 0..m {
                    for i in 0..nh {
                        let z: f64 = r.sample(StandardNormal);
                        a[(i, j)] = s * z;
                    }
                }
                a
            }
            _ => {
                let mut a = DMatrix::zeros(nh, m);
                for i in 0..nh.min(m) {
                    a[(i, i)] = self.coupling(i);
                }
                a
            }
        }
    }
}

/// Groups equal values so spectral sums run over distinct eigenvalues only.
/// Returns (value, multiplicity, Σ weights) triples.
pub(crate) fn group_spectrum(values: &[f64], weights: &[f64]) -> Vec<(f64, f64, f64)> {
    let mut out: Vec<(f64, f64, f64)> = Vec::new();
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    for i in idx {
        match out.last_mut() {
            Some(last) if last.0 == values[i] => {
                last.1 += 1.0;
                last.2 += weights[i];
            }
            _ => out.push((values[i], 1.0, weights[i])),
        }
    }
    out
}
