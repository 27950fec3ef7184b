//! Quenched average over a Gaussian feature map ψ = Aᵀψ_M/√N_H + ε with
//! A_ij ~ N(0, σ²). The entry scale is folded into Σ_M (Σ_M → σ²Σ_M,
//! w* → w*/σ) so the equations below carry σ² = 1.
//!
//! Saddle equations with D = I + q̂vΣ_M, E = (1 + v̂)I + q̂Σ_ε, η = N_H/M:
//!   q̂ = α/(λ+q)
//!   q  = v·tr[D⁻¹Σ_M] + tr[E⁻¹Σ_ε]
//!   ηv̂ = q̂·tr[D⁻¹Σ_M]
//!   ηv = tr[E⁻¹]
//! and E_g = ∂_J (1/M) Σ_k w_k² q̂λ_k/(1 + q̂vλ_k).

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};

use super::{ASpec, SaddleSolution, SolverOptions, SpectralModel};
use crate::error::{Result, VllError};

struct Folded {
    /// (σ²λ, multiplicity, Σ w²/σ²)
    teacher: Vec<(f64, f64, f64)>,
    /// (ε, multiplicity)
    noise: Vec<(f64, f64)>,
    m: f64,
    eta: f64,
    alpha: f64,
    ridge: f64,
}

#[derive(Debug, Clone, Copy)]
struct State {
    q_hat: f64,
    q: f64,
    v: f64,
    v_hat: f64,
}

/// Normalized traces at a given state.
struct Traces {
    t1: f64, // tr D⁻¹Σ
    t0: f64, // tr E⁻¹
    t2: f64, // tr E⁻¹Σ_ε
    a1: f64, // tr v²Σ²D⁻²
    b1: f64, // tr ΣD⁻²
    c1: f64, // tr Σ²D⁻²
    e0: f64, // tr E⁻²
    e1: f64, // tr Σ_εE⁻²
    e2: f64, // tr Σ_ε²E⁻²
}

impl Folded {
    fn new(model: &SpectralModel, alpha: f64, ridge: f64) -> Result<Self> {
        model.validate()?;
        let (sigma2, eta) = match model.a_spec {
            ASpec::Gaussian { sigma_a, eta } => (sigma_a * sigma_a, eta),
            _ => return Err(VllError::InvalidModel("quenched solver needs a Gaussian feature map".into())),
        };
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(VllError::InvalidConfig(format!("alpha_load must be non-negative, got {alpha}")));
        }
        if !(ridge >= 0.0) || !ridge.is_finite() {
            return Err(VllError::InvalidConfig(format!("ridge must be non-negative, got {ridge}")));
        }
        let lam: Vec<f64> = model.sigma_m_eigs.iter().map(|l| l * sigma2).collect();
        let w2: Vec<f64> = model.wstar.iter().map(|w| w * w / sigma2).collect();
        let teacher = super::group_spectrum(&lam, &w2);
        let ones = vec![0.0; model.n_h];
        let noise = super::group_spectrum(&model.noise_eigs, &ones)
            .into_iter()
            .map(|(e, mult, _)| (e, mult))
            .collect();
        let ridge = if ridge > 0.0 { ridge } else { 1e-8 * lam.iter().sum::<f64>() / lam.len() as f64 };
        Ok(Self { teacher, noise, m: model.m as f64, eta, alpha, ridge })
    }

    fn traces(&self, s: &State) -> Traces {
        let inv_m = 1.0 / self.m;
        let (mut t1, mut b1, mut c1) = (0.0, 0.0, 0.0);
        for &(l, mult, _) in &self.teacher {
            let d = 1.0 / (1.0 + s.q_hat * s.v * l);
            t1 += mult * l * d;
            b1 += mult * l * d * d;
            c1 += mult * l * l * d * d;
        }
        let a1 = s.v * s.v * c1;
        let (mut t0, mut t2, mut e0, mut e1, mut e2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(e, mult) in &self.noise {
            let inv = 1.0 / (1.0 + s.v_hat + s.q_hat * e);
            t0 += mult * inv;
            t2 += mult * e * inv;
            e0 += mult * inv * inv;
            e1 += mult * e * inv * inv;
            e2 += mult * e * e * inv * inv;
        }
        Traces {
            t1: t1 * inv_m,
            t0: t0 * inv_m,
            t2: t2 * inv_m,
            a1: a1 * inv_m,
            b1: b1 * inv_m,
            c1: c1 * inv_m,
            e0: e0 * inv_m,
            e1: e1 * inv_m,
            e2: e2 * inv_m,
        }
    }

    fn fixed_point_map(&self, s: &State) -> State {
        let tr = self.traces(s);
        State {
            q_hat: self.alpha / (self.ridge + s.q),
            q: s.v * tr.t1 + tr.t2,
            v: tr.t0 / self.eta,
            v_hat: s.q_hat * tr.t1 / self.eta,
        }
    }

    fn residual_vec(&self, s: &State) -> Vector4<f64> {
        let tr = self.traces(s);
        Vector4::new(
            s.q_hat - self.alpha / (self.ridge + s.q),
            s.q - s.v * tr.t1 - tr.t2,
            self.eta * s.v_hat - s.q_hat * tr.t1,
            self.eta * s.v - tr.t0,
        )
    }

    /// ∂R/∂(q̂, q, v, v̂). Also the matrix of the source-derivative system,
    /// since the source J enters only the first equation.
    fn jacobian(&self, s: &State) -> Matrix4<f64> {
        let tr = self.traces(s);
        let kappa = self.ridge + s.q;
        Matrix4::new(
            1.0,
            self.alpha / (kappa * kappa),
            0.0,
            0.0,
            tr.a1 + tr.e2,
            1.0,
            -tr.b1,
            tr.e1,
            -tr.b1,
            0.0,
            s.q_hat * s.q_hat * tr.c1,
            self.eta,
            tr.e1,
            0.0,
            self.eta,
            tr.e0,
        )
    }

    fn admissible(&self, s: &State) -> bool {
        s.q_hat > 0.0 && s.q > 0.0 && s.v > 0.0 && s.v_hat >= 0.0 && [s.q_hat, s.q, s.v, s.v_hat].iter().all(|x| x.is_finite())
    }
}

fn rel_step(a: &State, b: &State) -> f64 {
    let d = |x: f64, y: f64| (x - y).abs() / (1.0 + y.abs());
    d(a.q_hat, b.q_hat).max(d(a.q, b.q)).max(d(a.v, b.v)).max(d(a.v_hat, b.v_hat))
}

fn to_vec(s: &State) -> Vector4<f64> {
    Vector4::new(s.q_hat, s.q, s.v, s.v_hat)
}

fn from_vec(x: &Vector4<f64>) -> State {
    State { q_hat: x[0], q: x[1], v: x[2], v_hat: x[3] }
}

/// Residuals relative to each equation's left-hand side.
fn scaled_residual(f: &Folded, s: &State) -> Vector4<f64> {
    let r = f.residual_vec(s);
    let lhs = [s.q_hat, s.q, f.eta * s.v_hat, f.eta * s.v];
    Vector4::from_fn(|i, _| r[i] / lhs[i])
}

/// Newton step on log-variables against the scaled residual, with backtracking.
/// Past the interpolation threshold the ridgeless saddle has q, v of the order
/// of the ridge and q̂, v̂ of its inverse, which plain Newton cannot resolve.
/// `None` when no improving step exists.
fn newton_step(f: &Folded, s: &State) -> Option<State> {
    if !(s.v_hat > 0.0) {
        return None;
    }
    let r = f.residual_vec(s);
    let x = to_vec(s);
    let lhs = [s.q_hat, s.q, f.eta * s.v_hat, f.eta * s.v];
    // column of the variable that appears as each row's left-hand side
    let own = [0usize, 1, 3, 2];
    let j = f.jacobian(s);
    let jl = Matrix4::from_fn(|i, c| {
        let mut d = j[(i, c)];
        if c == own[i] {
            d -= r[i] / lhs[i] * if i >= 2 { f.eta } else { 1.0 };
        }
        d * x[c] / lhs[i]
    });
    let r0 = scaled_residual(f, s);
    let du = jl.lu().solve(&(-r0))?;
    let n0 = r0.amax();
    let mut t = 1.0;
    for _ in 0..40 {
        let cand = from_vec(&x.component_mul(&(du * t).map(f64::exp)));
        if f.admissible(&cand) && scaled_residual(f, &cand).amax() < n0 {
            return Some(cand);
        }
        t *= 0.5;
    }
    None
}

fn solve_state(f: &Folded, opts: SolverOptions) -> Result<(State, usize, f64)> {
    let mut s = State { q_hat: 0.0, q: 0.0, v: 1.0, v_hat: 0.0 };
    let tr = f.traces(&s);
    s.v = tr.t0 / f.eta;
    s.q = s.v * tr.t1 + tr.t2;
    s.q_hat = f.alpha / (f.ridge + s.q);
    if !(s.q > 0.0) {
        return Err(VllError::InvalidModel("student covariance has zero trace".into()));
    }
    s.v_hat = s.q_hat * f.traces(&s).t1 / f.eta;
    let mut it = 0;
    let mut converged = false;
    let mut polish = 0;
    while it < opts.max_iter {
        it += 1;
        let fp = f.fixed_point_map(&s);
        let update = rel_step(&fp, &s);
        // damped simultaneous update, accelerated by Newton when it helps
        let damped = State {
            q_hat: s.q_hat + opts.damping * (fp.q_hat - s.q_hat),
            q: s.q + opts.damping * (fp.q - s.q),
            v: s.v + opts.damping * (fp.v - s.v),
            v_hat: s.v_hat + opts.damping * (fp.v_hat - s.v_hat),
        };
        let next = if f.alpha > 0.0 { newton_step(f, &s).unwrap_or(damped) } else { damped };
        if !f.admissible(&next) && f.alpha > 0.0 {
            return Err(VllError::NoConvergence { iterations: it, residual: update });
        }
        let step = rel_step(&next, &s);
        s = next;
        if converged {
            polish += 1;
            if step <= 4.0 * f64::EPSILON || polish >= 3 {
                break;
            }
        } else if step <= opts.tol && update <= opts.tol.max(1e-11) && (f.alpha == 0.0 || scaled_residual(f, &s).amax() <= opts.tol.max(1e-11)) {
            converged = true;
        }
    }
    let residual = rel_step(&f.fixed_point_map(&s), &s);
    if !converged {
        return Err(VllError::NoConvergence { iterations: it, residual });
    }
    Ok((s, it, residual))
}

fn condition_number_4(m: &Matrix4<f64>) -> f64 {
    let sv = m.singular_values();
    let (mx, mn) = sv.iter().fold((0.0f64, f64::INFINITY), |(a, b), &v| (a.max(v), b.min(v)));
    mx / mn
}

fn general_derivatives(f: &Folded, s: &State) -> Result<(f64, f64, f64)> {
    let j = f.jacobian(s);
    let cond = condition_number_4(&j);
    if !cond.is_finite() || cond > 1e15 {
        return Err(VllError::SingularSystem(cond));
    }
    let d = j.lu().solve(&Vector4::new(1.0, 0.0, 0.0, 0.0)).ok_or(VllError::SingularSystem(cond))?;
    Ok((d[0], d[2], d[3]))
}

fn eg_general(f: &Folded, s: &State, d_q_hat: f64, d_v: f64) -> f64 {
    f.teacher
        .iter()
        .map(|&(l, _, w2)| {
            let den = 1.0 + s.q_hat * s.v * l;
            w2 * (l * d_q_hat - s.q_hat * s.q_hat * l * l * d_v) / (den * den)
        })
        .sum::<f64>()
        / f.m
}

/// Isotropic noise Σ_ε = σ_ε²I: eliminate q and v = 1/c, c = 1 + v̂ + σ_ε²q̂,
/// leaving a 2×2 system for (∂q̂, ∂v̂) with G = (cI + q̂Σ_M)⁻¹.
fn isotropic_derivatives(f: &Folded, s: &State, se2: f64) -> Result<(f64, f64, f64)> {
    let c = 1.0 + s.v_hat + se2 * s.q_hat;
    let (mut g2s, mut g2s2) = (0.0, 0.0);
    for &(l, mult, _) in &f.teacher {
        let g = 1.0 / (c + s.q_hat * l);
        g2s += mult * g * g * l;
        g2s2 += mult * g * g * l * l;
    }
    g2s /= f.m;
    g2s2 /= f.m;
    let eta = f.eta;
    let kappa = f.ridge + s.q;
    let ak = f.alpha / (kappa * kappa);
    let mat = Matrix2::new(
        1.0 - ak * (g2s2 + se2 * g2s + eta * se2 * se2 / (c * c)),
        -ak * (g2s + eta * se2 / (c * c)),
        -c * c * g2s - se2 * s.q_hat * s.q_hat * g2s2,
        eta - s.q_hat * s.q_hat * g2s2,
    );
    let sv = mat.singular_values();
    let cond = sv.max() / sv.min();
    if !cond.is_finite() || cond > 1e15 {
        return Err(VllError::SingularSystem(cond));
    }
    let d = mat.lu().solve(&Vector2::new(1.0, 0.0)).ok_or(VllError::SingularSystem(cond))?;
    let (dqh, dvh) = (d[0], d[1]);
    let dv = -(dvh + se2 * dqh) / (c * c);
    Ok((dqh, dv, dvh))
}

fn assemble(f: &Folded, s: State, it: usize, residual: f64, d: (f64, f64, f64)) -> SaddleSolution {
    let (dqh, dv, dvh) = d;
    let gamma = 1.0 - 1.0 / dqh;
    let divergent = !(dqh > 0.0) || !dqh.is_finite();
    let eg = eg_general(f, &s, dqh, dv);
    SaddleSolution {
        q: s.q,
        q_hat: s.q_hat,
        gamma,
        v: Some(s.v),
        v_hat: Some(s.v_hat),
        d_q_hat: Some(dqh),
        d_v_hat: Some(dvh),
        eg: if divergent { f64::INFINITY } else { eg.max(0.0) },
        iterations: it,
        residual,
        ridge: f.ridge,
        divergent,
    }
}

/// Quenched Gaussian-A learning curve. Isotropic noise spectra use the reduced
/// 2×2 source system; anything else uses the full 4×4 system.
pub fn solve_quenched_gaussian_a(model: &SpectralModel, alpha_load: f64, ridge: f64) -> Result<SaddleSolution> {
    solve_quenched_gaussian_a_opts(model, alpha_load, ridge, SolverOptions::default())
}

pub fn solve_quenched_gaussian_a_opts(
    model: &SpectralModel,
    alpha_load: f64,
    ridge: f64,
    opts: SolverOptions,
) -> Result<SaddleSolution> {
    let f = Folded::new(model, alpha_load, ridge)?;
    let (s, it, residual) = solve_state(&f, opts)?;
    let d = if f.noise.len() == 1 {
        isotropic_derivatives(&f, &s, f.noise[0].0)?
    } else {
        general_derivatives(&f, &s)?
    };
    Ok(assemble(&f, s, it, residual, d))
}

/// Same saddle point, source derivatives always from the 4×4 system.
pub fn quenched_derivatives_general(model: &SpectralModel, alpha_load: f64, ridge: f64) -> Result<SaddleSolution> {
    let f = Folded::new(model, alpha_load, ridge)?;
    let (s, it, residual) = solve_state(&f, SolverOptions::default())?;
    let d = general_derivatives(&f, &s)?;
    Ok(assemble(&f, s, it, residual, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(m: usize, eta: f64, noise: f64, eigs: Vec<f64>) -> SpectralModel {
        let nh = (eta * m as f64).round() as usize;
        SpectralModel::new(eigs, vec![1.0; m], vec![noise; nh], ASpec::Gaussian { sigma_a: 1.0, eta }).unwrap()
    }

    #[test]
    fn two_by_two_matches_four_by_four() {
        let eigs: Vec<f64> = (1..=100).map(|k| (k as f64).powf(-1.2)).collect();
        for &noise in &[0.0, 0.05, 0.3] {
            let model = gaussian(100, 0.6, noise, eigs.clone());
            for &load in &[0.2, 0.6, 1.5, 5.0] {
                let a = solve_quenched_gaussian_a(&model, load, 1e-3).unwrap();
                let b = quenched_derivatives_general(&model, load, 1e-3).unwrap();
                assert!((a.eg - b.eg).abs() < 1e-9 * b.eg, "noise {noise} load {load}: {} vs {}", a.eg, b.eg);
                assert!((a.d_v_hat.unwrap() - b.d_v_hat.unwrap()).abs() < 1e-8 * b.d_v_hat.unwrap().abs().max(1.0));
            }
        }
    }

    #[test]
    fn source_derivative_matches_finite_difference() {
        // ∂q̂/∂J by perturbing the first saddle equation through the ridge-free route:
        // q̂ = α/(λ+q) + J is equivalent to shifting α/(λ+q) by J, checked numerically.
        let eigs: Vec<f64> = (1..=60).map(|k| 1.0 / k as f64).collect();
        let model = gaussian(60, 0.5, 0.1, eigs);
        let f = Folded::new(&model, 0.8, 1e-2).unwrap();
        let (s, _, _) = solve_state(&f, SolverOptions::default()).unwrap();
        let (dqh, _, _) = general_derivatives(&f, &s).unwrap();
        let h = 1e-6;
        let solve_j = |j: f64| {
            let mut st = s;
            for _ in 0..200 {
                let r = f.residual_vec(&st) - Vector4::new(j, 0.0, 0.0, 0.0);
                let dx = f.jacobian(&st).lu().solve(&(-r)).unwrap();
                st = from_vec(&(to_vec(&st) + dx));
            }
            st
        };
        let fd = (solve_j(h).q_hat - solve_j(-h).q_hat) / (2.0 * h);
        assert!((fd - dqh).abs() < 1e-6 * dqh.abs(), "{fd} vs {dqh}");
    }
}
