//! Synthetic regression tasks: Gegenbauer polynomials of a random projection of
//! sphere-uniform inputs, and draws from the Gaussian covariate model.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Result, VllError};
use crate::rng::{derive_seed, rng, Rng};
use crate::theory::SpectralModel;

#[derive(Debug, Clone, PartialEq)]
pub struct SphereDataset {
    /// P×D, unit-norm rows.
    pub inputs: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub degree_k: usize,
    pub beta: Vec<f64>,
    pub norm_const: f64,
}

impl SphereDataset {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

/// A fixed target function: the projection direction and its normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereTask {
    pub d: usize,
    pub degree_k: usize,
    pub beta: Vec<f64>,
    pub norm_const: f64,
}

fn draw_unit_row(r: &mut Rng, d: usize, out: &mut [f64]) {
    loop {
        let mut ss = 0.0;
        for v in out.iter_mut() {
            *v = r.sample(StandardNormal);
            ss += *v * *v;
        }
        if ss > 0.0 {
            let norm = ss.sqrt();
            out.iter_mut().for_each(|v| *v /= norm);
            debug_assert_eq!(out.len(), d);
            return;
        }
    }
}

/// `n` points drawn uniformly on the unit sphere in `d` dimensions.
pub fn sample_sphere(n: usize, d: usize, seed: u64) -> Result<DMatrix<f64>> {
    if d == 0 {
        return Err(VllError::InvalidDimension("sphere dimension must be at least 1".into()));
    }
    let mut r = rng(seed);
    let mut out = DMatrix::zeros(n, d);
    let mut row = vec![0.0; d];
    for i in 0..n {
        draw_unit_row(&mut r, d, &mut row);
        for (j, v) in row.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    Ok(out)
}

/// Gegenbauer polynomial C_k^{(lam)}(t) by the three-term recurrence.
pub fn gegenbauer(k: usize, lam: f64, t: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let mut prev = 1.0;
    let mut cur = 2.0 * lam * t;
    for n in 1..k {
        let nf = n as f64;
        let next = (2.0 * t * (nf + lam) * cur - (nf + 2.0 * lam - 1.0) * prev) / (nf + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

/// The degree-k zonal polynomial used as a target in dimension `d`.
/// On the circle the Gegenbauer family degenerates (C_k^{(0)} = 0), so the
/// λ → 0 limit, the Chebyshev polynomial T_k, is used instead.
pub fn zonal_poly(k: usize, d: usize, t: f64) -> f64 {
    if d == 2 {
        if k == 0 {
            1.0
        } else {
            (k as f64 * t.clamp(-1.0, 1.0).acos()).cos()
        }
    } else {
        gegenbauer(k, (d as f64 - 2.0) / 2.0, t)
    }
}

impl SphereTask {
    pub fn new(d: usize, degree_k: usize, beta_norm: f64, n_mc: usize, seed: u64) -> Result<Self> {
        if d < 2 {
            return Err(VllError::InvalidDimension(format!("tasks need d >= 2, got {d}")));
        }
        if degree_k < 1 {
            return Err(VllError::InvalidConfig("target degree k must be at least 1".into()));
        }
        if !(beta_norm > 0.0) || n_mc == 0 {
            return Err(VllError::InvalidConfig("beta_norm must be positive and n_mc nonzero".into()));
        }
        let b = sample_sphere(1, d, derive_seed(seed, "beta", &[]))?;
        let beta: Vec<f64> = b.row(0).iter().map(|v| v * beta_norm).collect();
        let mc = sample_sphere(n_mc, d, derive_seed(seed, "norm", &[]))?;
        let mut second = 0.0;
        for i in 0..n_mc {
            let t: f64 = (0..d).map(|j| beta[j] * mc[(i, j)]).sum();
            let q = zonal_poly(degree_k, d, t);
            second += q * q;
        }
        second /= n_mc as f64;
        if !(second >= 1e-14) {
            return Err(VllError::DegenerateTask(second));
        }
        Ok(Self { d, degree_k, beta, norm_const: second.sqrt() })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let t: f64 = self.beta.iter().zip(x).map(|(b, v)| b * v).sum();
        zonal_poly(self.degree_k, self.d, t) / self.norm_const
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<SphereDataset> {
        let inputs = sample_sphere(n, self.d, seed)?;
        Ok(self.label(inputs))
    }

    pub fn label(&self, inputs: DMatrix<f64>) -> SphereDataset {
        let mut row = vec![0.0; self.d];
        let targets = DVector::from_iterator(
            inputs.nrows(),
            (0..inputs.nrows()).map(|i| {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = inputs[(i, j)];
                }
                self.eval(&row)
            }),
        );
        SphereDataset {
            inputs,
            targets,
            degree_k: self.degree_k,
            beta: self.beta.clone(),
            norm_const: self.norm_const,
        }
    }
}

/// Train and test sets sharing one target function.
pub fn make_task(
    d: usize,
    k: usize,
    p_train: usize,
    p_test: usize,
    beta_norm: f64,
    n_mc: usize,
    seed: u64,
) -> Result<(SphereDataset, SphereDataset)> {
    if p_train == 0 || p_test == 0 {
        return Err(VllError::InvalidConfig("train and test sizes must be positive".into()));
    }
    let task = SphereTask::new(d, k, beta_norm, n_mc, seed)?;
    let train = task.sample(p_train, derive_seed(seed, "train", &[]))?;
    let test = task.sample(p_test, derive_seed(seed, "test", &[]))?;
    Ok((train, test))
}

/// One draw of `p` samples from the Gaussian covariate model. For the
/// Gaussian feature-map spec a fresh `A` is drawn from the same seed.
pub fn sample_gaussian_covariates(
    model: &SpectralModel,
    p: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let mut r = rng(seed);
    let a = model.feature_matrix(&mut r);
    let (feats, y, _) = sample_with_feature_matrix(model, &a, p, &mut r);
    Ok((feats, y))
}

/// Samples given an explicit N_H×M feature matrix. Also returns the teacher features.
pub fn sample_with_feature_matrix(
    model: &SpectralModel,
    a: &DMatrix<f64>,
    p: usize,
    r: &mut Rng,
) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let m = model.m;
    let nh = model.n_h;
    let sq: Vec<f64> = model.sigma_m_eigs.iter().map(|v| v.sqrt()).collect();
    let nsq: Vec<f64> = model.noise_eigs.iter().map(|v| v.max(0.0).sqrt()).collect();
    let mut teacher = DMatrix::zeros(p, m);
    for i in 0..p {
        for k in 0..m {
            let b: f64 = r.sample(StandardNormal);
            teacher[(i, k)] = sq[k] * b;
        }
    }
    let mut feats = &teacher * a.transpose();
    for i in 0..p {
        for j in 0..nh {
            let e: f64 = r.sample(StandardNormal);
            feats[(i, j)] += nsq[j] * e;
        }
    }
    let w = DVector::from_column_slice(&model.wstar);
    let y = (&teacher * w) / (m as f64).sqrt();
    (feats, y, teacher)
}
