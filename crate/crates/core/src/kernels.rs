//! Infinite-width ReLU NTK, empirical NTKs of finite networks, alignment
//! metrics, and the Mercer square-root feature map used for feature averaging.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, VllError};
use crate::linalg::{frobenius, gemm, sym_eigen_desc};
use crate::nn::{AlphaMode, MlpState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    NtkInf,
    Nngp,
    Entk0,
    Entkf,
    Averaged,
    Reconstructed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramKernel {
    pub matrix: DMatrix<f64>,
    pub provenance: Provenance,
    /// Identifiers of the points indexing the rows.
    pub point_ids: Vec<u64>,
    /// Identifiers of the column points; equal to `point_ids` for square Grams.
    pub col_ids: Vec<u64>,
}

impl GramKernel {
    /// Wrap a matrix with sequential point ids. Square matrices must be symmetric.
    pub fn new(matrix: DMatrix<f64>, provenance: Provenance) -> Result<Self> {
        let (n, m) = matrix.shape();
        let g = GramKernel { matrix, provenance, point_ids: (0..n as u64).collect(), col_ids: (0..m as u64).collect() };
        if n == m {
            g.check_symmetric()?;
        }
        Ok(g)
    }

    pub fn with_ids(mut self, rows: Vec<u64>, cols: Vec<u64>) -> Result<Self> {
        if rows.len() != self.matrix.nrows() || cols.len() != self.matrix.ncols() {
            return Err(VllError::Shape("id lists do not match the Gram shape".into()));
        }
        self.point_ids = rows;
        self.col_ids = cols;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_square(&self) -> bool {
        self.matrix.nrows() == self.matrix.ncols()
    }

    pub fn check_symmetric(&self) -> Result<()> {
        if !self.matrix.iter().all(|v| v.is_finite()) {
            return Err(VllError::NonFinite("Gram matrix"));
        }
        let scale = self.matrix.amax().max(f64::MIN_POSITIVE);
        let n = self.matrix.nrows();
        for i in 0..n {
            for j in 0..i {
                if (self.matrix[(i, j)] - self.matrix[(j, i)]).abs() > 1e-10 * scale {
                    return Err(VllError::Shape(format!("Gram matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    /// Numerical PSD check: smallest eigenvalue ≥ −1e-8 · largest.
    pub fn check_psd(&self) -> Result<()> {
        if !self.is_square() {
            return Err(VllError::Shape("PSD check needs a square Gram".into()));
        }
        self.check_symmetric()?;
        let (vals, _) = sym_eigen_desc(&self.matrix);
        let (hi, lo) = (vals[0], vals[vals.len() - 1]);
        if lo < -1e-8 * hi.max(0.0) {
            return Err(VllError::NotPsd { min: lo, max: hi });
        }
        Ok(())
    }

    /// Submatrix on the given row and column positions.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> GramKernel {
        let m = DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.matrix[(rows[i], cols[j])]);
        GramKernel {
            matrix: m,
            provenance: self.provenance,
            point_ids: rows.iter().map(|&i| self.point_ids[i]).collect(),
            col_ids: cols.iter().map(|&j| self.col_ids[j]).collect(),
        }
    }
}

fn row_norms_sq(x: &DMatrix<f64>) -> Vec<f64> {
    x.row_iter().map(|r| r.norm_squared()).collect()
}

/// NTK and NNGP of a depth-`depth` bias-free ReLU MLP with layer prefactor σ/√fan_in.
/// Returns (ntk, nngp), both n×m.
pub fn ntk_infinite_relu(x1: &DMatrix<f64>, x2: &DMatrix<f64>, depth: usize, sigma: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = x1.ncols();
    if x2.ncols() != d {
        return Err(VllError::Shape(format!("input dimensions differ: {} vs {}", d, x2.ncols())));
    }
    if d == 0 || depth < 1 {
        return Err(VllError::InvalidDimension("need d >= 1 and depth >= 1".into()));
    }
    let s2 = sigma * sigma;
    let mut cov = DMatrix::zeros(x1.nrows(), x2.nrows());
    gemm(s2 / d as f64, x1, false, x2, true, 0.0, &mut cov);
    let mut d1: Vec<f64> = row_norms_sq(x1).into_iter().map(|v| s2 * v / d as f64).collect();
    let mut d2: Vec<f64> = row_norms_sq(x2).into_iter().map(|v| s2 * v / d as f64).collect();
    let mut ntk = cov.clone();
    for _ in 1..depth {
        for j in 0..cov.ncols() {
            for i in 0..cov.nrows() {
                let nn = (d1[i] * d2[j]).sqrt();
                let (sig, dot) = if nn > 0.0 {
                    let rho = (cov[(i, j)] / nn).clamp(-1.0, 1.0);
                    let th = rho.acos();
                    (s2 * nn / (2.0 * PI) * (th.sin() + (PI - th) * rho), s2 * (PI - th) / (2.0 * PI))
                } else {
                    (0.0, 0.0)
                };
                cov[(i, j)] = sig;
                ntk[(i, j)] = sig + ntk[(i, j)] * dot;
            }
        }
        d1.iter_mut().for_each(|v| *v *= s2 / 2.0);
        d2.iter_mut().for_each(|v| *v *= s2 / 2.0);
    }
    Ok((ntk, cov))
}

/// NTK and NNGP of two unit-norm inputs with inner product `t`.
pub fn ntk_relu_unit(t: f64, d: usize, depth: usize, sigma: f64) -> (f64, f64) {
    let s2 = sigma * sigma;
    let mut diag = s2 / d as f64;
    let mut cov = diag * t;
    let mut ntk = cov;
    for _ in 1..depth {
        let (sig, dot) = if diag > 0.0 {
            let rho = (cov / diag).clamp(-1.0, 1.0);
            let th = rho.acos();
            (s2 * diag / (2.0 * PI) * (th.sin() + (PI - th) * rho), s2 * (PI - th) / (2.0 * PI))
        } else {
            (0.0, 0.0)
        };
        cov = sig;
        ntk = sig + ntk * dot;
        diag *= s2 / 2.0;
    }
    (ntk, cov)
}

/// Dimension of the degree-`l` spherical harmonics on the sphere in R^d.
pub fn harmonic_multiplicity(d: usize, l: usize) -> f64 {
    if l == 0 {
        return 1.0;
    }
    // (2l + d − 2)/l · C(l + d − 3, l − 1)
    let mut binom = 1.0;
    for i in 1..l {
        binom *= (d - 3 + 1 + i) as f64 / i as f64;
    }
    (2 * l + d - 2) as f64 / l as f64 * binom
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DegreeEigen {
    pub degree: usize,
    pub eigenvalue: f64,
    pub multiplicity: f64,
}

/// Eigenvalues of the infinite-width NTK as an integral operator on the uniform
/// sphere in R^d, one per harmonic degree up to `max_degree`, by Funk–Hecke
/// quadrature in the polar angle (`n_quad` Simpson panels).
pub fn ntk_sphere_spectrum(d: usize, depth: usize, sigma: f64, max_degree: usize, n_quad: usize) -> Result<Vec<DegreeEigen>> {
    if d < 3 {
        return Err(VllError::InvalidDimension(format!("sphere spectrum needs d >= 3, got {d}")));
    }
    let n = (n_quad.max(2) + 1) & !1;
    let h = PI / n as f64;
    let lam = (d as f64 - 2.0) / 2.0;
    let mut weights = Vec::with_capacity(n + 1);
    let mut ts = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let th = i as f64 * h;
        let simpson = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        weights.push(simpson * h / 3.0 * th.sin().powi(d as i32 - 2));
        ts.push(th.cos());
    }
    let norm: f64 = weights.iter().sum();
    let kern: Vec<f64> = ts.iter().map(|&t| ntk_relu_unit(t, d, depth, sigma).0).collect();
    Ok((0..=max_degree)
        .map(|l| {
            let at_one = crate::taskgen::gegenbauer(l, lam, 1.0);
            let integral: f64 = (0..=n).map(|i| weights[i] * kern[i] * crate::taskgen::gegenbauer(l, lam, ts[i])).sum();
            DegreeEigen { degree: l, eigenvalue: integral / (norm * at_one), multiplicity: harmonic_multiplicity(d, l) }
        })
        .collect())
}

/// Infinite-width NTK matching a network's architecture and laziness convention.
pub fn ntk_for(state: &MlpState, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (k, _) = ntk_infinite_relu(x1, x2, state.depth, state.sigma)?;
    Ok(match state.alpha_mode {
        AlphaMode::WeightRescale => k,
        AlphaMode::OutputRescale => k * (state.alpha * state.alpha),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntkOptions {
    pub block_rows: usize,
    pub budget_bytes: usize,
}

impl Default for EntkOptions {
    fn default() -> Self {
        Self { block_rows: 256, budget_bytes: 2 << 30 }
    }
}

pub fn entk(state: &MlpState, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<GramKernel> {
    entk_opts(state, x1, x2, EntkOptions::default())
}

/// Empirical tangent kernel of the centered output at the current weights.
///
/// Uses the layerwise factorization
/// K = s² Σ_ℓ c_ℓ² (Δ_ℓᵀΔ'_ℓ) ⊙ (A_{ℓ−1}ᵀA'_{ℓ−1})
/// so no per-sample Jacobian is materialized; `x1` is processed in row blocks.
pub fn entk_opts(state: &MlpState, x1: &DMatrix<f64>, x2: &DMatrix<f64>, opts: EntkOptions) -> Result<GramKernel> {
    if x1.ncols() != state.input_dim || x2.ncols() != state.input_dim {
        return Err(VllError::Shape("eNTK inputs do not match the network input dimension".into()));
    }
    let (n, m) = (x1.nrows(), x2.nrows());
    let block = opts.block_rows.max(1).min(n.max(1));
    let per_point: usize = state.weights.iter().map(|w| w.nrows() + w.ncols()).sum();
    let needed = 8 * ((m + block) * per_point + n * m);
    if needed > opts.budget_bytes {
        return Err(VllError::Budget { needed, budget: opts.budget_bytes });
    }
    let square = std::ptr::eq(x1, x2) || x1 == x2;
    let (fw2, deltas2) = state.sensitivities(x2);
    let s = state.output_scale();
    let last = state.depth - 1;

    let starts: Vec<usize> = (0..n).step_by(block).collect();
    let blocks: Vec<DMatrix<f64>> = starts
        .par_iter()
        .map(|&r0| {
            let rows = block.min(n - r0);
            let xb = x1.rows(r0, rows).into_owned();
            let (fw1, deltas1) = state.sensitivities(&xb);
            let mut out = DMatrix::zeros(rows, m);
            let mut prod = DMatrix::zeros(rows, m);
            for l in 0..=last {
                let c2 = s * s * state.prefactor(l).powi(2);
                if l == 0 {
                    gemm(1.0, &xb, false, x2, true, 0.0, &mut prod);
                } else {
                    gemm(1.0, &fw1.post[l - 1], true, &fw2.post[l - 1], false, 0.0, &mut prod);
                }
                if l == last {
                    out.zip_apply(&prod, |o, p| *o += c2 * p);
                } else {
                    let mut dd = DMatrix::zeros(rows, m);
                    gemm(1.0, &deltas1[l], true, &deltas2[l], false, 0.0, &mut dd);
                    out.zip_zip_apply(&prod, &dd, |o, p, q| *o += c2 * p * q);
                }
            }
            out
        })
        .collect();
    let mut k = DMatrix::zeros(n, m);
    for (&r0, b) in starts.iter().zip(&blocks) {
        k.rows_mut(r0, b.nrows()).copy_from(b);
    }
    if square {
        k = crate::linalg::symmetrized(&k);
    }
    let at_init = state.weights.iter().zip(state.init_weights()).all(|(a, b)| a == b);
    let prov = if at_init { Provenance::Entk0 } else { Provenance::Entkf };
    GramKernel::new(k, prov)
}

fn check_target(k: &GramKernel, y: &[f64]) -> Result<f64> {
    if !k.is_square() || k.n() != y.len() {
        return Err(VllError::Shape(format!("kernel {}x{} vs target length {}", k.n(), k.matrix.ncols(), y.len())));
    }
    let yy: f64 = y.iter().map(|v| v * v).sum();
    if yy == 0.0 {
        return Err(VllError::UndefinedAlignment("target has zero norm"));
    }
    Ok(yy)
}

fn quad(k: &DMatrix<f64>, y: &[f64]) -> f64 {
    let n = y.len();
    (0..n).map(|i| y[i] * (0..n).map(|j| k[(i, j)] * y[j]).sum::<f64>()).sum()
}

/// yᵀKy / (Tr K · |y|²).
pub fn alignment(k: &GramKernel, y: &[f64]) -> Result<f64> {
    let yy = check_target(k, y)?;
    let tr = k.matrix.trace();
    if tr <= 0.0 {
        return Err(VllError::UndefinedAlignment("kernel has zero trace"));
    }
    Ok(quad(&k.matrix, y) / (tr * yy))
}

/// yᵀKy / (|K|_F · |y|²).
pub fn alignment_frobenius(k: &GramKernel, y: &[f64]) -> Result<f64> {
    let yy = check_target(k, y)?;
    let f = frobenius(&k.matrix);
    if f == 0.0 {
        return Err(VllError::UndefinedAlignment("kernel has zero norm"));
    }
    Ok(quad(&k.matrix, y) / (f * yy))
}

fn centered(k: &DMatrix<f64>) -> DMatrix<f64> {
    let n = k.nrows();
    let rows: Vec<f64> = (0..n).map(|i| k.row(i).sum() / n as f64).collect();
    let cols: Vec<f64> = (0..n).map(|j| k.column(j).sum() / n as f64).collect();
    let all = rows.iter().sum::<f64>() / n as f64;
    DMatrix::from_fn(n, n, |i, j| k[(i, j)] - rows[i] - cols[j] + all)
}

/// Centered kernel alignment with the product normalization, so CKA(K, K) = 1
/// and CKA is invariant to positive rescaling of either argument.
pub fn cka(k1: &GramKernel, k2: &GramKernel) -> Result<f64> {
    if !k1.is_square() || k1.matrix.shape() != k2.matrix.shape() {
        return Err(VllError::Shape("CKA needs two square kernels of equal size".into()));
    }
    let (c1, c2) = (centered(&k1.matrix), centered(&k2.matrix));
    let (n1, n2) = (frobenius(&c1), frobenius(&c2));
    if n1 == 0.0 || n2 == 0.0 {
        return Err(VllError::UndefinedAlignment("centered kernel has zero norm"));
    }
    Ok(c1.dot(&c2) / (n1 * n2))
}

/// Orthonormal basis of functions on a shared evaluation grid (one column per basis
/// function), identified so that feature maps in different bases are never mixed.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedBasis {
    pub id: String,
    pub vectors: DMatrix<f64>,
}

impl FixedBasis {
    pub fn new(id: impl Into<String>, vectors: DMatrix<f64>) -> Result<Self> {
        if !vectors.is_square() {
            return Err(VllError::Shape("basis must be square (complete on the grid)".into()));
        }
        Ok(Self { id: id.into(), vectors })
    }

    /// Eigenbasis of the infinite-width NTK on `grid`; deterministic in its inputs.
    pub fn ntk_reference(grid: &DMatrix<f64>, depth: usize, sigma: f64) -> Result<Self> {
        let (k, _) = ntk_infinite_relu(grid, grid, depth, sigma)?;
        let (_, vecs) = sym_eigen_desc(&k);
        let mut h = Sha256::new();
        h.update((grid.nrows() as u64).to_le_bytes());
        h.update((grid.ncols() as u64).to_le_bytes());
        h.update((depth as u64).to_le_bytes());
        h.update(sigma.to_le_bytes());
        for v in grid.transpose().iter() {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        let id: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        Self::new(format!("ntk-grid-{id}"), vecs)
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// n×b: row per grid point, column per basis function.
    pub features: DMatrix<f64>,
    pub basis_id: String,
    /// Retained eigenvalues of K/n, descending.
    pub eigenvalues: Vec<f64>,
}

impl FeatureMap {
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    /// ψψᵀ on the grid.
    pub fn gram(&self) -> GramKernel {
        let n = self.features.nrows();
        let mut k = DMatrix::zeros(n, n);
        gemm(1.0, &self.features, false, &self.features, true, 0.0, &mut k);
        GramKernel {
            matrix: crate::linalg::symmetrized(&k),
            provenance: Provenance::Reconstructed,
            point_ids: (0..n as u64).collect(),
            col_ids: (0..n as u64).collect(),
        }
    }
}

/// Square-root feature map ψ = K^{1/2}·V expressed in the fixed basis V.
/// Modes of K/n below `rank_tol · λ_max` are dropped.
pub fn mercer_features(k: &GramKernel, basis: &FixedBasis, rank_tol: f64) -> Result<FeatureMap> {
    if !k.is_square() || k.n() != basis.len() {
        return Err(VllError::GridMismatch(format!("kernel on {} points, basis on {}", k.n(), basis.len())));
    }
    let n = k.n();
    let (vals, vecs) = sym_eigen_desc(&k.matrix);
    let lmax = vals.first().copied().unwrap_or(0.0);
    let r = vals.iter().take_while(|&&v| lmax > 0.0 && v > rank_tol * lmax).count();
    let mut scaled = vecs.columns(0, r).into_owned();
    for j in 0..r {
        scaled.column_mut(j).scale_mut(vals[j].sqrt());
    }
    // Uᵀ V, then U diag(√μ) (Uᵀ V).
    let mut proj = DMatrix::zeros(r, n);
    gemm(1.0, &vecs.columns(0, r).into_owned(), true, &basis.vectors, false, 0.0, &mut proj);
    let mut features = DMatrix::zeros(n, n);
    gemm(1.0, &scaled, false, &proj, false, 0.0, &mut features);
    Ok(FeatureMap {
        features,
        basis_id: basis.id.clone(),
        eigenvalues: vals[..r].iter().map(|v| v / n as f64).collect(),
    })
}
