//! Fixed feature map A: a single self-consistent scalar q.
//!
//! With S = AΣ_MAᵀ + Σ_ε and G = (I + q̂S)⁻¹,
//!   q̂ = α/(λ+q),  q = tr GS,  γ = α/(λ+q)² · tr G²S²,
//!   E_g = (1−γ)⁻¹ (1/M) w*ᵀ[Σ_M − q̂Σ_MAᵀ(G + G²)AΣ_M]w*.

use nalgebra::{DMatrix, DVector};

use super::{SaddleSolution, SolverOptions, SpectralModel};
use crate::error::{Result, VllError};
use crate::linalg::sym_eigen_desc;

/// One student eigen-direction (possibly degenerate) of S.
#[derive(Debug, Clone, Copy)]
struct Channel {
    t: f64,
    mult: f64,
}

/// Solution of the scalar fixed point on a channel list.
struct ScalarFixedPoint {
    q: f64,
    q_hat: f64,
    gamma: f64,
    iterations: usize,
    residual: f64,
}

fn q_map(ch: &[Channel], inv_m: f64, q_hat: f64) -> f64 {
    ch.iter().map(|c| c.mult * c.t / (1.0 + q_hat * c.t)).sum::<f64>() * inv_m
}

fn gamma_at(ch: &[Channel], inv_m: f64, alpha: f64, kappa: f64, q_hat: f64) -> f64 {
    let s: f64 = ch
        .iter()
        .map(|c| {
            let g = c.t / (1.0 + q_hat * c.t);
            c.mult * g * g
        })
        .sum();
    alpha / (kappa * kappa) * s * inv_m
}

fn solve_scalar(
    ch: &[Channel],
    m: f64,
    alpha: f64,
    ridge: f64,
    opts: SolverOptions,
) -> Result<ScalarFixedPoint> {
    let inv_m = 1.0 / m;
    let q_hat_of = |q: f64| alpha / (ridge + q);
    let resid = |q: f64| q_map(ch, inv_m, q_hat_of(q)) - q;

    let mut q = q_map(ch, inv_m, 0.0);
    if !(q > 0.0) {
        return Err(VllError::InvalidModel("student covariance has zero trace".into()));
    }
    let mut iterations = 0;
    let mut converged = false;
    let mut polish = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let qh = q_hat_of(q);
        let f = q_map(ch, inv_m, qh);
        let r = f - q;
        let mut next = q + opts.damping * r;
        // Newton on F(q) − q; the slope of F is exactly γ, so the step is r/(1−γ).
        let g = gamma_at(ch, inv_m, alpha, ridge + q, qh);
        if g < 1.0 {
            let newton = q + r / (1.0 - g);
            if newton.is_finite() && newton > 0.0 && resid(newton).abs() < r.abs() {
                next = newton;
            }
        }
        if !next.is_finite() {
            return Err(VllError::NoConvergence { iterations, residual: f64::NAN });
        }
        let step = (next - q).abs();
        q = next;
        if converged {
            polish += 1;
            if step <= 4.0 * f64::EPSILON * q.abs() || polish >= 3 {
                break;
            }
        } else if step <= opts.tol * (1.0 + q.abs()) {
            converged = true;
        }
    }
    let residual = resid(q).abs();
    if !converged {
        return Err(VllError::NoConvergence { iterations, residual });
    }
    let q_hat = q_hat_of(q);
    let gamma = gamma_at(ch, inv_m, alpha, ridge + q, q_hat);
    Ok(ScalarFixedPoint { q, q_hat, gamma, iterations, residual })
}

fn effective_ridge(ridge: f64, ch: &[Channel]) -> Result<f64> {
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(VllError::InvalidConfig(format!("ridge must be finite and non-negative, got {ridge}")));
    }
    if ridge > 0.0 {
        return Ok(ridge);
    }
    let (sum, n) = ch.iter().fold((0.0, 0.0), |(s, n), c| (s + c.mult * c.t, n + c.mult));
    Ok(1e-8 * sum / n)
}

fn check_load(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(VllError::InvalidConfig(format!("alpha_load must be finite and non-negative, got {alpha}")));
    }
    Ok(())
}

/// Per-direction data of a structured (simultaneously diagonal) model.
struct Structured {
    channels: Vec<Channel>,
    /// (t, noise, Σ λw²) for each distinct (t, noise) pair
    seen: Vec<(f64, f64, f64)>,
    unseen: f64,
}

fn structured(model: &SpectralModel) -> Structured {
    let nh = model.n_h;
    let mut rows: Vec<(f64, f64, f64)> = (0..nh)
        .map(|i| {
            let (lam, w) = if i < model.m { (model.sigma_m_eigs[i], model.wstar[i]) } else { (0.0, 0.0) };
            let a = model.coupling(i);
            (a * a * lam + model.noise_eigs[i], model.noise_eigs[i], lam * w * w)
        })
        .collect();
    let unseen: f64 = (nh.min(model.m)..model.m)
        .map(|k| model.sigma_m_eigs[k] * model.wstar[k] * model.wstar[k])
        .sum();
    rows.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let mut seen: Vec<(f64, f64, f64)> = Vec::new();
    let mut channels: Vec<Channel> = Vec::new();
    for (t, n, p) in rows {
        match (seen.last_mut(), channels.last_mut()) {
            (Some(s), Some(c)) if s.0 == t && s.1 == n => {
                s.2 += p;
                c.mult += 1.0;
            }
            _ => {
                seen.push((t, n, p));
                channels.push(Channel { t, mult: 1.0 });
            }
        }
    }
    Structured { channels, seen, unseen }
}

/// Fixed-A learning curve for identity, diagonal or projection maps.
pub fn solve_fixed_a(model: &SpectralModel, alpha_load: f64, ridge: f64) -> Result<SaddleSolution> {
    solve_fixed_a_opts(model, alpha_load, ridge, SolverOptions::default())
}

pub fn solve_fixed_a_opts(
    model: &SpectralModel,
    alpha_load: f64,
    ridge: f64,
    opts: SolverOptions,
) -> Result<SaddleSolution> {
    model.validate()?;
    check_load(alpha_load)?;
    if !model.is_structured() {
        return Err(VllError::InvalidModel(
            "Gaussian feature maps need an explicit draw (solve_fixed_a_with_matrix) or the quenched solver".into(),
        ));
    }
    let st = structured(model);
    let ridge = effective_ridge(ridge, &st.channels)?;
    let m = model.m as f64;
    let fp = solve_scalar(&st.channels, m, alpha_load, ridge, opts)?;
    let qh = fp.q_hat;
    // Per-direction error λw²·[G² + q̂ n G(1+G)] avoids the cancellation in the
    // textbook form λw²·[1 − q̂a²λG(1+G)].
    let seen: f64 = st
        .seen
        .iter()
        .map(|&(t, n, p)| {
            let g = 1.0 / (1.0 + qh * t);
            p * (g * g + qh * n * g * (1.0 + g))
        })
        .sum();
    Ok(finish(fp, ridge, (st.unseen + seen) / m))
}

fn finish(fp: ScalarFixedPoint, ridge: f64, bracket: f64) -> SaddleSolution {
    let divergent = !(fp.gamma < 1.0);
    let d_q_hat = 1.0 / (1.0 - fp.gamma);
    SaddleSolution {
        q: fp.q,
        q_hat: fp.q_hat,
        gamma: fp.gamma,
        v: None,
        v_hat: None,
        d_q_hat: Some(d_q_hat),
        d_v_hat: None,
        eg: if divergent { f64::INFINITY } else { (d_q_hat * bracket).max(0.0) },
        iterations: fp.iterations,
        residual: fp.residual,
        ridge,
        divergent,
    }
}

/// Student covariance S = AΣ_MAᵀ + Σ_ε and the vector AΣ_Mw*.
fn dense_parts(model: &SpectralModel, a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if a.nrows() != model.n_h || a.ncols() != model.m {
        return Err(VllError::Shape(format!(
            "feature matrix is {}x{}, expected {}x{}",
            a.nrows(),
            a.ncols(),
            model.n_h,
            model.m
        )));
    }
    let mut a_sig = a.clone();
    for (k, l) in model.sigma_m_eigs.iter().enumerate() {
        a_sig.column_mut(k).scale_mut(*l);
    }
    let mut s = &a_sig * a.transpose();
    for (i, n) in model.noise_eigs.iter().enumerate() {
        s[(i, i)] += n;
    }
    let b = &a_sig * DVector::from_column_slice(&model.wstar);
    Ok((s, b))
}

/// Fixed-A learning curve for an explicit N_H×M feature matrix.
pub fn solve_fixed_a_with_matrix(
    model: &SpectralModel,
    a: &DMatrix<f64>,
    alpha_load: f64,
    ridge: f64,
) -> Result<SaddleSolution> {
    check_load(alpha_load)?;
    let (s, b) = dense_parts(model, a)?;
    let (t, u) = sym_eigen_desc(&s);
    let z = u.transpose() * b;
    let channels: Vec<Channel> = t.iter().map(|&t| Channel { t: t.max(0.0), mult: 1.0 }).collect();
    let ridge = effective_ridge(ridge, &channels)?;
    let m = model.m as f64;
    let fp = solve_scalar(&channels, m, alpha_load, ridge, SolverOptions::default())?;
    let qh = fp.q_hat;
    let explained: f64 = channels
        .iter()
        .zip(z.iter())
        .map(|(c, z)| {
            let g = 1.0 / (1.0 + qh * c.t);
            z * z * (g + g * g)
        })
        .sum();
    let prior = model.prior_error() * m;
    Ok(finish(fp, ridge, (prior - qh * explained) / m))
}

/// Large-P floor (1/M) w*ᵀ[Σ_M − Σ_MAᵀ(AΣ_MAᵀ + Σ_ε)⁺AΣ_M]w* for structured maps.
pub fn irreducible_error(model: &SpectralModel) -> Result<f64> {
    model.validate()?;
    if !model.is_structured() {
        return Err(VllError::InvalidModel(
            "Gaussian feature maps need an explicit draw (irreducible_error_with_matrix)".into(),
        ));
    }
    let st = structured(model);
    let seen: f64 = st.seen.iter().map(|&(t, n, p)| if t > 0.0 { p * n / t } else { p }).sum();
    Ok((st.unseen + seen) / model.m as f64)
}

pub fn irreducible_error_with_matrix(model: &SpectralModel, a: &DMatrix<f64>) -> Result<f64> {
    let (s, b) = dense_parts(model, a)?;
    let (x, _) = crate::linalg::pinv_solve(&s, &b, 1e-12);
    let m = model.m as f64;
    Ok(((model.prior_error() * m - b.dot(&x)) / m).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::ASpec;

    fn scalar() -> SpectralModel {
        SpectralModel::new(vec![1.0], vec![1.0], vec![0.0], ASpec::Identity).unwrap()
    }

    #[test]
    fn scalar_model_gives_one_minus_load() {
        for i in 1..10 {
            let a = i as f64 / 10.0;
            let s = solve_fixed_a(&scalar(), a, 1e-10).unwrap();
            assert!((s.eg - (1.0 - a)).abs() < 1e-6, "alpha {a}: {}", s.eg);
            assert!(s.residual <= 1e-10);
        }
    }

    #[test]
    fn zero_load_returns_prior() {
        let m = SpectralModel::power_law(50, 1.5, vec![1.0; 50]).unwrap();
        let s = solve_fixed_a(&m, 0.0, 1e-3).unwrap();
        assert!((s.eg - m.prior_error()).abs() < 1e-12);
    }

    #[test]
    fn dense_path_agrees_with_structured() {
        let eigs: Vec<f64> = (1..=30).map(|k| 1.0 / k as f64).collect();
        let w: Vec<f64> = (0..30).map(|k| ((k * 7 % 5) as f64 - 2.0) * 0.7).collect();
        let noise: Vec<f64> = eigs[..20].iter().map(|l| 0.1 * l).collect();
        let model = SpectralModel::new(eigs, w, noise, ASpec::Projection { keep_top: 20 }).unwrap();
        let mut r = crate::rng::rng(0);
        let a = model.feature_matrix(&mut r);
        for &load in &[0.3, 1.0, 4.0] {
            let s1 = solve_fixed_a(&model, load, 1e-3).unwrap();
            let s2 = solve_fixed_a_with_matrix(&model, &a, load, 1e-3).unwrap();
            assert!((s1.eg - s2.eg).abs() < 1e-10 * s1.eg.max(1.0), "{} vs {}", s1.eg, s2.eg);
            assert!((s1.q - s2.q).abs() < 1e-12);
        }
        let i1 = irreducible_error(&model).unwrap();
        let i2 = irreducible_error_with_matrix(&model, &a).unwrap();
        assert!((i1 - i2).abs() < 1e-10);
    }
}
