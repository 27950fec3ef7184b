//! Monte Carlo learning curves: sample the covariate model, ridge-regress on the
//! student features, and score the fitted weights in closed form.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::SpectralModel;
use crate::error::Result;
use crate::regression::solve_duals;
use crate::rng::{derive_seed, rng};
use crate::taskgen::sample_with_feature_matrix;

/// Population error of f = ψ·w/√M:
/// (1/M)[(Aᵀw − w*)ᵀΣ_M(Aᵀw − w*) + wᵀΣ_εw].
pub fn population_error(model: &SpectralModel, a: &DMatrix<f64>, w: &DVector<f64>) -> f64 {
    let atw = a.transpose() * w;
    let signal: f64 = (0..model.m)
        .map(|k| {
            let d = atw[k] - model.wstar[k];
            model.sigma_m_eigs[k] * d * d
        })
        .sum();
    let noise: f64 = (0..model.n_h).map(|i| model.noise_eigs[i] * w[i] * w[i]).sum();
    (signal + noise) / model.m as f64
}

fn one_trial(model: &SpectralModel, fixed_a: Option<&DMatrix<f64>>, p: usize, ridge: f64, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let drawn;
    let a = match fixed_a {
        Some(a) => a,
        None => {
            drawn = model.feature_matrix(&mut r);
            &drawn
        }
    };
    let (feats, y, _) = sample_with_feature_matrix(model, a, p, &mut r);
    let m = model.m as f64;
    let k = (&feats * feats.transpose()) / m;
    let duals = solve_duals(&k, &y, ridge)?;
    let w = feats.transpose() * duals / m.sqrt();
    Ok(population_error(model, a, &w))
}

/// Mean and sample standard deviation of E_g over `trials` draws at each P.
/// Structured maps use one fixed A; Gaussian maps draw a fresh A per trial.
pub fn mc_learning_curve(
    model: &SpectralModel,
    p_grid: &[usize],
    ridge: f64,
    trials: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    model.validate()?;
    let fixed = if model.is_structured() { Some(model.feature_matrix(&mut rng(seed))) } else { None };
    let mut means = Vec::with_capacity(p_grid.len());
    let mut stds = Vec::with_capacity(p_grid.len());
    for &p in p_grid {
        let errs: Vec<f64> = (0..trials)
            .into_par_iter()
            .map(|t| one_trial(model, fixed.as_ref(), p, ridge, derive_seed(seed, "mc", &[p as u64, t as u64])))
            .collect::<Result<_>>()?;
        let n = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / n;
        let var = if errs.len() > 1 { errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        means.push(mean);
        stds.push(var.sqrt());
    }
    Ok((means, stds))
}
