//! Averaging over initializations (of predictions, Grams, or features), the
//! seed/dataset bias-variance split, and the variance-onset sample size.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Result, VllError};
use crate::kernels::{FeatureMap, GramKernel, Provenance};

pub const DEFAULT_ENSEMBLE_SIZE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct GridMeta {
    pub p: usize,
    pub n: usize,
    pub alpha: f64,
    pub k: usize,
}

/// Test-set predictions indexed by (seed, dataset, test point).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrid {
    values: Vec<f64>,
    seeds: usize,
    datasets: usize,
    pub targets: DVector<f64>,
    pub meta: GridMeta,
}

impl PredictionGrid {
    /// `cells[s][d]` holds the predictions of seed `s` trained on dataset `d`.
    pub fn new(cells: &[Vec<DVector<f64>>], targets: DVector<f64>, meta: GridMeta) -> Result<Self> {
        let seeds = cells.len();
        let datasets = cells.first().map_or(0, |c| c.len());
        if seeds == 0 || datasets == 0 {
            return Err(VllError::InsufficientReplication { seeds, datasets });
        }
        let t = targets.len();
        let mut values = Vec::with_capacity(seeds * datasets * t);
        for row in cells {
            if row.len() != datasets {
                return Err(VllError::Shape("ragged prediction grid".into()));
            }
            for v in row {
                if v.len() != t {
                    return Err(VllError::Shape(format!("cell has {} predictions, expected {t}", v.len())));
                }
                values.extend(v.iter());
            }
        }
        if !values.iter().chain(targets.iter()).all(|v| v.is_finite()) {
            return Err(VllError::NonFinite("prediction grid"));
        }
        Ok(Self { values, seeds, datasets, targets, meta })
    }

    pub fn seeds(&self) -> usize {
        self.seeds
    }

    pub fn datasets(&self) -> usize {
        self.datasets
    }

    pub fn test_points(&self) -> usize {
        self.targets.len()
    }

    pub fn get(&self, s: usize, d: usize, t: usize) -> f64 {
        self.values[(s * self.datasets + d) * self.targets.len() + t]
    }

    /// Error of every member, mean over test points; row = seed.
    pub fn member_errors(&self) -> DMatrix<f64> {
        let t_n = self.test_points();
        DMatrix::from_fn(self.seeds, self.datasets, |s, d| {
            (0..t_n).map(|t| (self.get(s, d, t) - self.targets[t]).powi(2)).sum::<f64>() / t_n as f64
        })
    }

    /// Mean single-member error.
    pub fn mean_member_error(&self) -> f64 {
        self.member_errors().mean()
    }

    /// Mean over datasets of the error of the seed-averaged predictor.
    pub fn ensembled_error(&self) -> f64 {
        mean_row_error(&ensemble_predictions(self), &self.targets)
    }
}

fn mean_row_error(preds: &DMatrix<f64>, targets: &DVector<f64>) -> f64 {
    let t_n = targets.len() as f64;
    let mut total = 0.0;
    for r in 0..preds.nrows() {
        total += (0..targets.len()).map(|t| (preds[(r, t)] - targets[t]).powi(2)).sum::<f64>() / t_n;
    }
    total / preds.nrows() as f64
}

/// Mean over seeds; row = dataset.
pub fn ensemble_predictions(grid: &PredictionGrid) -> DMatrix<f64> {
    let (s_n, d_n, t_n) = (grid.seeds, grid.datasets, grid.test_points());
    DMatrix::from_fn(d_n, t_n, |d, t| (0..s_n).map(|s| grid.get(s, d, t)).sum::<f64>() / s_n as f64)
}

/// Mean over datasets (bagging); row = seed.
pub fn bagged_predictions(grid: &PredictionGrid) -> DMatrix<f64> {
    let (s_n, d_n, t_n) = (grid.seeds, grid.datasets, grid.test_points());
    DMatrix::from_fn(s_n, t_n, |s, t| (0..d_n).map(|d| grid.get(s, d, t)).sum::<f64>() / d_n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceDecomposition {
    pub bias_sq: f64,
    pub v_dataset: f64,
    pub v_init: f64,
    /// Plug-in residual; may be negative at finite replication.
    pub v_cross: f64,
    pub total: f64,
}

impl VarianceDecomposition {
    pub fn cross_negative(&self) -> bool {
        self.v_cross < 0.0
    }
}

/// Plug-in split of the mean member error into bias², dataset, init and cross terms.
pub fn decompose(grid: &PredictionGrid) -> Result<VarianceDecomposition> {
    let (s_n, d_n, t_n) = (grid.seeds, grid.datasets, grid.test_points());
    if s_n < 2 || d_n < 2 {
        return Err(VllError::InsufficientReplication { seeds: s_n, datasets: d_n });
    }
    let by_data = ensemble_predictions(grid);
    let by_seed = bagged_predictions(grid);
    let (mut bias, mut vd, mut vi) = (0.0, 0.0, 0.0);
    for t in 0..t_n {
        let m = by_data.column(t).mean();
        bias += (m - grid.targets[t]).powi(2);
        vd += by_data.column(t).iter().map(|v| (v - m).powi(2)).sum::<f64>() / d_n as f64;
        vi += by_seed.column(t).iter().map(|v| (v - m).powi(2)).sum::<f64>() / s_n as f64;
    }
    let tn = t_n as f64;
    let (bias_sq, v_dataset, v_init) = (bias / tn, vd / tn, vi / tn);
    let total = grid.mean_member_error();
    Ok(VarianceDecomposition { bias_sq, v_dataset, v_init, v_cross: total - bias_sq - v_dataset - v_init, total })
}

/// Entrywise mean of Grams on one shared point set.
pub fn ensemble_kernels(kernels: &[GramKernel]) -> Result<GramKernel> {
    let first = kernels.first().ok_or_else(|| VllError::InvalidConfig("no kernels to average".into()))?;
    let mut sum = DMatrix::zeros(first.matrix.nrows(), first.matrix.ncols());
    for k in kernels {
        if k.matrix.shape() != first.matrix.shape() || k.point_ids != first.point_ids || k.col_ids != first.col_ids {
            return Err(VllError::GridMismatch("kernels are evaluated on different points".into()));
        }
        sum += &k.matrix;
    }
    Ok(GramKernel {
        matrix: sum / kernels.len() as f64,
        provenance: Provenance::Averaged,
        point_ids: first.point_ids.clone(),
        col_ids: first.col_ids.clone(),
    })
}

/// Entrywise mean of feature maps expressed in the same basis.
pub fn ensemble_features(maps: &[FeatureMap]) -> Result<FeatureMap> {
    let first = maps.first().ok_or_else(|| VllError::InvalidConfig("no feature maps to average".into()))?;
    let rank = maps.iter().map(|m| m.rank()).max().unwrap_or(0);
    let mut feats = DMatrix::zeros(first.features.nrows(), first.features.ncols());
    let mut eigs = vec![0.0; rank];
    for m in maps {
        if m.basis_id != first.basis_id {
            return Err(VllError::BasisMismatch(first.basis_id.clone(), m.basis_id.clone()));
        }
        if m.features.shape() != first.features.shape() {
            return Err(VllError::GridMismatch("feature maps cover different grids".into()));
        }
        feats += &m.features;
        for (e, v) in eigs.iter_mut().zip(&m.eigenvalues) {
            *e += v;
        }
    }
    let e = maps.len() as f64;
    Ok(FeatureMap { features: feats / e, basis_id: first.basis_id.clone(), eigenvalues: eigs.into_iter().map(|v| v / e).collect() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PHalf {
    pub p_half: f64,
    pub bracket_lo: f64,
    pub bracket_hi: f64,
}

/// Sample size where eg_ensembled / eg_single first crosses 1/2, interpolating the
/// ratio linearly in log P. `None` when the ratio never reaches 1/2.
pub fn p_half(p_grid: &[f64], eg_single: &[f64], eg_ensembled: &[f64]) -> Result<Option<PHalf>> {
    let n = p_grid.len();
    if n < 2 || eg_single.len() != n || eg_ensembled.len() != n {
        return Err(VllError::Shape("p_half needs equal-length curves with at least two points".into()));
    }
    if p_grid.windows(2).any(|w| !(w[1] > w[0])) || p_grid[0] <= 0.0 {
        return Err(VllError::InvalidConfig("P grid must be positive and strictly increasing".into()));
    }
    if eg_single.iter().chain(eg_ensembled).any(|e| !(*e > 0.0)) {
        return Err(VllError::InvalidConfig("errors must be positive".into()));
    }
    let g: Vec<f64> = eg_ensembled.iter().zip(eg_single).map(|(e, s)| e / s - 0.5).collect();
    for i in 0..n - 1 {
        let (ga, gb) = (g[i], g[i + 1]);
        if ga == 0.0 {
            return Ok(Some(PHalf { p_half: p_grid[i], bracket_lo: p_grid[i], bracket_hi: p_grid[i] }));
        }
        if ga * gb > 0.0 {
            continue;
        }
        let (la, lb) = (p_grid[i].ln(), p_grid[i + 1].ln());
        let at = |x: f64| ga + (gb - ga) * (x - la) / (lb - la);
        let (mut lo, mut hi) = (la, lb);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if at(mid) * ga > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        return Ok(Some(PHalf { p_half: (0.5 * (lo + hi)).exp(), bracket_lo: p_grid[i], bracket_hi: p_grid[i + 1] }));
    }
    Ok(None)
}
