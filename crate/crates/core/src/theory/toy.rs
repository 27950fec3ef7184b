//! Toy models of a noisy finite-width kernel: a projection onto the top modes
//! of a reference spectrum, feature noise Σ_ε = σ_ε²Σ_M, and an optional
//! P-dependent amplification of the target eigenvalue.

use super::{solve_fixed_a, ASpec, SaddleSolution, SpectralModel};
use crate::error::{Result, VllError};
use crate::kernels::{harmonic_multiplicity, ntk_infinite_relu, ntk_relu_unit, ntk_sphere_spectrum};
use crate::linalg::sym_eigen_desc;
use crate::taskgen::sample_sphere;

#[derive(Debug, Clone, PartialEq)]
pub enum SpectrumSource {
    Explicit(Vec<f64>),
    /// Eigenvalues of the infinite-width ReLU NTK on `n_grid` sphere points.
    NtkGrid { d: usize, depth: usize, n_grid: usize, seed: u64 },
    /// Sphere spectrum of the infinite-width ReLU NTK: degrees 0..=max_degree, each
    /// eigenvalue repeated by its multiplicity, plus a lumped block for the rest of the trace.
    NtkSphere { d: usize, depth: usize, max_degree: usize },
}

/// Quadrature panels used for sphere spectra.
pub const SPHERE_QUAD: usize = 20_000;

impl SpectrumSource {
    /// Eigenvalues in non-increasing order.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        match self {
            SpectrumSource::Explicit(v) => Ok(v.clone()),
            SpectrumSource::NtkGrid { d, depth, n_grid, seed } => ntk_grid_spectrum(*d, *depth, *n_grid, *seed),
            SpectrumSource::NtkSphere { d, depth, max_degree } => {
                let mut v = vec![];
                for (value, count) in sphere_blocks(*d, *depth, *max_degree)? {
                    v.extend(std::iter::repeat_n(value, count));
                }
                v.sort_by(|a, b| b.total_cmp(a));
                Ok(v)
            }
        }
    }

    /// Index of the first mode of harmonic degree `degree` in the sorted list.
    pub fn degree_index(&self, degree: usize) -> Result<usize> {
        let SpectrumSource::NtkSphere { d, depth, max_degree } = self else {
            return Err(VllError::InvalidModel("harmonic degrees exist only for sphere spectra".into()));
        };
        if degree > *max_degree {
            return Err(VllError::InvalidModel(format!("degree {degree} exceeds max_degree {max_degree}")));
        }
        let blocks = sphere_blocks(*d, *depth, *max_degree)?;
        let target = blocks[degree].0;
        Ok(blocks.iter().filter(|b| b.0 > target).map(|b| b.1).sum())
    }
}

/// (eigenvalue, multiplicity) per degree 0..=max_degree, plus one block of
/// degree max_degree+1 multiplicity carrying the trace the truncation left out.
fn sphere_blocks(d: usize, depth: usize, max_degree: usize) -> Result<Vec<(f64, usize)>> {
    let spec = ntk_sphere_spectrum(d, depth, 1.0, max_degree, SPHERE_QUAD)?;
    let mut blocks: Vec<(f64, usize)> =
        spec.iter().map(|e| (e.eigenvalue.max(0.0), e.multiplicity.round() as usize)).collect();
    let kept: f64 = blocks.iter().map(|(v, c)| v * *c as f64).sum();
    let missing = ntk_relu_unit(1.0, d, depth, 1.0).0 - kept;
    let count = harmonic_multiplicity(d, max_degree + 1).round() as usize;
    if missing > 0.0 && count > 0 {
        blocks.push((missing / count as f64, count));
    }
    Ok(blocks)
}

/// Δλ(P) = coef·√P added to the target eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Amplification {
    pub coef: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub base: SpectralModel,
    pub target_mode: usize,
    pub amplify: Option<Amplification>,
}

/// Eigenvalues of (1/n)·NTK_∞ on a random sphere grid, keeping those above 1e-12·λ_max.
pub fn ntk_grid_spectrum(d: usize, depth: usize, n_grid: usize, seed: u64) -> Result<Vec<f64>> {
    let x = sample_sphere(n_grid, d, seed)?;
    let (k, _) = ntk_infinite_relu(&x, &x, depth, 1.0)?;
    let (vals, _) = sym_eigen_desc(&(k / n_grid as f64));
    let top = vals[0];
    Ok(vals.into_iter().filter(|v| *v > 1e-12 * top).collect())
}

/// Unit-power target on `target_mode`: w_k = √(M/λ_k) so that (1/M)λ_k w_k² = 1.
pub fn build_toy(
    source: &SpectrumSource,
    keep_top: Option<usize>,
    noise_scale: f64,
    target_mode: usize,
    amplify: Option<Amplification>,
) -> Result<ToyModel> {
    let eigs = source.eigenvalues()?;
    let m = eigs.len();
    let keep_top = keep_top.unwrap_or(m);
    if keep_top > m || keep_top == 0 {
        return Err(VllError::InvalidModel(format!("keep_top = {keep_top} must be in 1..={m}")));
    }
    if target_mode >= m {
        return Err(VllError::InvalidModel(format!("target mode {target_mode} out of range for M = {m}")));
    }
    if amplify.is_some() && target_mode >= keep_top {
        return Err(VllError::InvalidModel("amplified target mode must be among the kept modes".into()));
    }
    if !(noise_scale >= 0.0) {
        return Err(VllError::InvalidModel("noise_scale must be non-negative".into()));
    }
    let mut wstar = vec![0.0; m];
    wstar[target_mode] = (m as f64 / eigs[target_mode]).sqrt();
    let noise = eigs[..keep_top].iter().map(|l| noise_scale * l).collect();
    let base = SpectralModel::new(eigs, wstar, noise, ASpec::Projection { keep_top })?;
    Ok(ToyModel { base, target_mode, amplify })
}

impl ToyModel {
    /// The model seen at sample size `p`. Amplification raises the target
    /// eigenvalue, keeps the target at unit power, and re-sorts the kept modes.
    pub fn model_at(&self, p: f64) -> SpectralModel {
        let Some(amp) = self.amplify else { return self.base.clone() };
        let k = self.target_mode;
        let mut b = self.base.clone();
        let lam = b.sigma_m_eigs[k] + amp.coef * p.max(0.0).sqrt();
        let w = (b.m as f64 / lam).sqrt();
        let noise = b.noise_eigs[k];
        b.sigma_m_eigs.remove(k);
        b.wstar.remove(k);
        b.noise_eigs.remove(k);
        let pos = b.sigma_m_eigs.iter().position(|&l| l < lam).unwrap_or(b.sigma_m_eigs.len());
        b.sigma_m_eigs.insert(pos, lam);
        b.wstar.insert(pos, w);
        b.noise_eigs.insert(pos, noise);
        b
    }

    pub fn solve(&self, p: f64, ridge: f64) -> Result<SaddleSolution> {
        let model = self.model_at(p);
        solve_fixed_a(&model, p / model.m as f64, ridge)
    }

    /// The same toy with its feature noise removed.
    pub fn noiseless(&self) -> ToyModel {
        let mut t = self.clone();
        t.base.noise_eigs.iter_mut().for_each(|v| *v = 0.0);
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spectrum() -> Vec<f64> {
        (1..=400).map(|k| 1.0 / k as f64).collect()
    }

    #[test]
    fn zero_amplification_changes_nothing() {
        let plain = build_toy(&SpectrumSource::Explicit(spectrum()), Some(300), 0.01, 3, None).unwrap();
        let amp = build_toy(&SpectrumSource::Explicit(spectrum()), Some(300), 0.01, 3, Some(Amplification { coef: 0.0 })).unwrap();
        for &p in &[10.0, 100.0, 1000.0] {
            assert_eq!(plain.solve(p, 1e-6).unwrap().eg, amp.solve(p, 1e-6).unwrap().eg);
        }
    }

    #[test]
    fn amplification_helps() {
        let plain = build_toy(&SpectrumSource::Explicit(spectrum()), Some(300), 0.01, 3, None).unwrap();
        let amp = build_toy(&SpectrumSource::Explicit(spectrum()), Some(300), 0.01, 3, Some(Amplification { coef: 0.05 })).unwrap();
        assert!(amp.solve(200.0, 1e-6).unwrap().eg < plain.solve(200.0, 1e-6).unwrap().eg);
    }

    #[test]
    fn target_has_unit_power() {
        let t = build_toy(&SpectrumSource::Explicit(spectrum()), Some(400), 0.0, 7, None).unwrap();
        assert!((t.base.prior_error() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn keep_top_beyond_m_is_rejected() {
        assert!(build_toy(&SpectrumSource::Explicit(spectrum()), Some(401), 0.0, 0, None).is_err());
    }
}
