//! Bias-free ReLU MLP in NTK parameterization:
//! h¹ = σ/√D · W¹x,  hˡ = σ/√N · Wˡ φ(hˡ⁻¹),  f̃ = h^L.
//!
//! Laziness is set either by rescaling the weights (σ = α^{1/L}) or by scaling
//! the centered output by α with σ = 1. The trained function is always centered,
//! f = scale·(f̃_θ − f̃_θ₀), so it vanishes at initialization.
//!
//! Activations are stored one sample per column.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blob::NamedArray;
use crate::error::{Result, VllError};
use crate::linalg::gemm;
use crate::rng::rng;
use crate::taskgen::SphereDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    WeightRescale,
    OutputRescale,
}

#[derive(Debug, Clone)]
pub struct MlpState {
    /// W¹: N×D, Wˡ: N×N, W^L: 1×N.
    pub weights: Vec<DMatrix<f64>>,
    pub depth: usize,
    pub width: usize,
    pub input_dim: usize,
    pub sigma: f64,
    pub alpha_mode: AlphaMode,
    pub alpha: f64,
    init_weights: Arc<Vec<DMatrix<f64>>>,
}

/// Preactivations and ReLU outputs of the hidden layers, plus the raw output.
#[derive(Debug, Clone)]
pub struct Forward {
    pub pre: Vec<DMatrix<f64>>,
    pub post: Vec<DMatrix<f64>>,
    pub out: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStatus {
    Converged,
    MaxStepsOk,
    Discard,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: MlpState,
    pub status: TrainStatus,
    pub steps: usize,
    pub train_loss: f64,
    pub test_error: f64,
    /// Learning rate actually used after any halvings.
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    pub threshold: f64,
    pub max_steps: usize,
    /// Halve the rate and restart on divergence, at most this many times.
    pub max_halvings: usize,
}

impl TrainOptions {
    pub fn new(lr: f64) -> Self {
        Self { lr, threshold: 1e-6, max_steps: 30_000, max_halvings: 5 }
    }
}

fn relu_inplace(m: &mut DMatrix<f64>) {
    m.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Zero the entries of `d` whose preactivation is not strictly positive.
fn mask_inplace(d: &mut DMatrix<f64>, pre: &DMatrix<f64>) {
    d.iter_mut().zip(pre.iter()).for_each(|(g, h)| {
        if *h <= 0.0 {
            *g = 0.0
        }
    });
}

pub fn init_mlp(d: usize, depth: usize, width: usize, alpha: f64, alpha_mode: AlphaMode, seed: u64) -> Result<MlpState> {
    if d == 0 {
        return Err(VllError::InvalidDimension("input dimension must be positive".into()));
    }
    if depth < 2 || width == 0 {
        return Err(VllError::InvalidConfig(format!("need depth >= 2 and width >= 1, got L={depth}, N={width}")));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(VllError::InvalidConfig(format!("alpha must be positive, got {alpha}")));
    }
    let mut r = rng(seed);
    let mut weights = Vec::with_capacity(depth);
    for l in 0..depth {
        let rows = if l + 1 == depth { 1 } else { width };
        let cols = if l == 0 { d } else { width };
        let w = DMatrix::from_fn(rows, cols, |_, _| r.sample::<f64, _>(StandardNormal));
        weights.push(w);
    }
    let sigma = match alpha_mode {
        AlphaMode::WeightRescale => alpha.powf(1.0 / depth as f64),
        AlphaMode::OutputRescale => 1.0,
    };
    let init = Arc::new(weights.clone());
    Ok(MlpState { weights, depth, width, input_dim: d, sigma, alpha_mode, alpha, init_weights: init })
}

impl MlpState {
    pub fn init_weights(&self) -> &[DMatrix<f64>] {
        &self.init_weights
    }

    /// Layer prefactor σ/√fan_in for layer `l` (0-based).
    pub fn prefactor(&self, l: usize) -> f64 {
        let fan_in = if l == 0 { self.input_dim } else { self.width };
        self.sigma / (fan_in as f64).sqrt()
    }

    /// Multiplier applied to the centered output.
    pub fn output_scale(&self) -> f64 {
        match self.alpha_mode {
            AlphaMode::WeightRescale => 1.0,
            AlphaMode::OutputRescale => self.alpha,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    /// base_lr·σ^{−2L} for weight rescaling, base_lr/α² for output rescaling; both
    /// undo the α² growth of the tangent kernel.
    pub fn default_lr(&self, base_lr: f64) -> f64 {
        match self.alpha_mode {
            AlphaMode::WeightRescale => base_lr * self.sigma.powi(-2 * self.depth as i32),
            AlphaMode::OutputRescale => base_lr / (self.alpha * self.alpha),
        }
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(VllError::Shape(format!("batch has {} columns, network expects {}", x.ncols(), self.input_dim)));
        }
        Ok(())
    }

    fn forward_with(&self, weights: &[DMatrix<f64>], x: &DMatrix<f64>) -> Forward {
        let n = x.nrows();
        let mut pre = Vec::with_capacity(self.depth - 1);
        let mut post: Vec<DMatrix<f64>> = Vec::with_capacity(self.depth - 1);
        for l in 0..self.depth - 1 {
            let mut h = DMatrix::zeros(weights[l].nrows(), n);
            match post.last() {
                None => gemm(self.prefactor(l), &weights[l], false, x, true, 0.0, &mut h),
                Some(a) => gemm(self.prefactor(l), &weights[l], false, a, false, 0.0, &mut h),
            }
            let mut a = h.clone();
            relu_inplace(&mut a);
            pre.push(h);
            post.push(a);
        }
        let l = self.depth - 1;
        let mut out = DMatrix::zeros(1, n);
        gemm(self.prefactor(l), &weights[l], false, post.last().unwrap(), false, 0.0, &mut out);
        Forward { pre, post, out: DVector::from_iterator(n, out.iter().copied()) }
    }

    /// Raw (uncentered) outputs and hidden activations.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<Forward> {
        self.check_input(x)?;
        Ok(self.forward_with(&self.weights, x))
    }

    /// Raw outputs of the network at its initialization.
    pub fn init_output(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        Ok(self.forward_with(&self.init_weights, x).out)
    }

    pub fn centered_output(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let f = self.forward(x)?.out;
        let f0 = self.init_output(x)?;
        Ok((f - f0) * self.output_scale())
    }

    /// Loss and gradient given cached initial outputs `f0` on the same batch.
    fn loss_grad_cached(&self, x: &DMatrix<f64>, y: &DVector<f64>, f0: &DVector<f64>) -> (f64, Vec<DMatrix<f64>>) {
        let fw = self.forward_with(&self.weights, x);
        let n = x.nrows() as f64;
        let s = self.output_scale();
        let resid: DVector<f64> = (&fw.out - f0) * s - y;
        let loss = resid.norm_squared() / n;
        let g = DMatrix::from_iterator(1, x.nrows(), resid.iter().map(|r| 2.0 * s * r / n));
        (loss, self.backprop(x, &fw, &g))
    }

    /// Reverse pass for output cotangent `g` (1×n); returns weight gradients.
    fn backprop(&self, x: &DMatrix<f64>, fw: &Forward, g: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let depth = self.depth;
        let mut grads: Vec<DMatrix<f64>> = self.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
        let last = depth - 1;
        gemm(self.prefactor(last), g, false, &fw.post[last - 1], true, 0.0, &mut grads[last]);
        let mut delta = DMatrix::zeros(self.width, x.nrows());
        gemm(self.prefactor(last), &self.weights[last], true, g, false, 0.0, &mut delta);
        mask_inplace(&mut delta, &fw.pre[last - 1]);
        for l in (0..last).rev() {
            if l == 0 {
                gemm(self.prefactor(0), &delta, false, x, false, 0.0, &mut grads[0]);
            } else {
                gemm(self.prefactor(l), &delta, false, &fw.post[l - 1], true, 0.0, &mut grads[l]);
                let mut next = DMatrix::zeros(self.width, x.nrows());
                gemm(self.prefactor(l), &self.weights[l], true, &delta, false, 0.0, &mut next);
                mask_inplace(&mut next, &fw.pre[l - 1]);
                delta = next;
            }
        }
        grads
    }

    /// Per-layer backpropagated sensitivities ∂f̃/∂hˡ for every sample (unit
    /// cotangent), used to assemble tangent kernels without materializing Jacobians.
    pub(crate) fn sensitivities(&self, x: &DMatrix<f64>) -> (Forward, Vec<DMatrix<f64>>) {
        let fw = self.forward_with(&self.weights, x);
        let last = self.depth - 1;
        let n = x.nrows();
        let mut deltas = vec![DMatrix::zeros(0, 0); last];
        let mut delta = DMatrix::zeros(self.width, n);
        let ones = DMatrix::from_element(1, n, 1.0);
        gemm(self.prefactor(last), &self.weights[last], true, &ones, false, 0.0, &mut delta);
        mask_inplace(&mut delta, &fw.pre[last - 1]);
        for l in (0..last).rev() {
            if l > 0 {
                let mut next = DMatrix::zeros(self.width, n);
                gemm(self.prefactor(l), &self.weights[l], true, &delta, false, 0.0, &mut next);
                mask_inplace(&mut next, &fw.pre[l - 1]);
                deltas[l] = std::mem::replace(&mut delta, next);
            } else {
                deltas[0] = std::mem::replace(&mut delta, DMatrix::zeros(0, 0));
            }
        }
        (fw, deltas)
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let mut v: Vec<NamedArray> =
            self.weights.iter().enumerate().map(|(i, w)| NamedArray::from_matrix(&format!("w{}", i + 1), w)).collect();
        v.extend(self.init_weights.iter().enumerate().map(|(i, w)| NamedArray::from_matrix(&format!("w{}_init", i + 1), w)));
        v
    }

    /// Rebuild a state from checkpoint arrays written by [`MlpState::to_arrays`].
    pub fn from_arrays(arrays: &[NamedArray], alpha: f64, alpha_mode: AlphaMode) -> Result<Self> {
        let get = |name: String| {
            arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| VllError::Schema(format!("checkpoint is missing '{name}'")))
                .and_then(|a| a.to_matrix())
        };
        let depth = arrays.iter().filter(|a| !a.name.ends_with("_init")).count();
        let weights = (1..=depth).map(|i| get(format!("w{i}"))).collect::<Result<Vec<_>>>()?;
        let init = (1..=depth).map(|i| get(format!("w{i}_init"))).collect::<Result<Vec<_>>>()?;
        let mut s = init_mlp(weights[0].ncols(), depth, weights[0].nrows(), alpha, alpha_mode, 0)?;
        for (a, b) in s.weights.iter().zip(&weights) {
            if a.shape() != b.shape() {
                return Err(VllError::Shape("checkpoint layer shapes are inconsistent".into()));
            }
        }
        s.weights = weights;
        s.init_weights = Arc::new(init);
        Ok(s)
    }
}

/// Mean squared loss (1/P)Σ(f − y)² on the centered output and its gradient.
pub fn grad_loss(state: &MlpState, data: &SphereDataset) -> Result<(f64, Vec<DMatrix<f64>>)> {
    if data.is_empty() {
        return Err(VllError::InvalidConfig("empty dataset".into()));
    }
    let f0 = state.init_output(&data.inputs)?;
    Ok(state.loss_grad_cached(&data.inputs, &data.targets, &f0))
}

/// `fraction · P / λ_max(eNTK₀)`: the quadratic-model stability limit of
/// full-batch descent on the mean squared loss, scaled by `fraction`.
pub fn auto_lr(state: &MlpState, train: &SphereDataset, fraction: f64) -> Result<f64> {
    let k = crate::kernels::entk(state, &train.inputs, &train.inputs)?;
    let top = crate::linalg::top_eigenvalue(&k.matrix, 500);
    if !(top > 0.0) {
        return Err(VllError::DegenerateKernel);
    }
    Ok(fraction * train.len() as f64 / top)
}

/// Full-batch gradient descent until the train loss reaches `threshold`.
/// Runs that stop at `max_steps` are kept when train loss < 10 × test error.
pub fn train_full_batch(state: &MlpState, train: &SphereDataset, test: &SphereDataset, opts: TrainOptions) -> Result<TrainOutcome> {
    if !(opts.lr > 0.0) {
        return Err(VllError::InvalidConfig(format!("learning rate must be positive, got {}", opts.lr)));
    }
    if train.is_empty() {
        return Err(VllError::InvalidConfig("empty training set".into()));
    }
    state.check_input(&train.inputs)?;
    let f0 = state.init_output(&train.inputs)?;
    let mut lr = opts.lr;
    let mut halvings = 0;
    loop {
        match descend(state, train, &f0, lr, opts) {
            Ok((s, steps, loss, converged)) => {
                let test_error = crate::regression::gen_error(&s.centered_output(&test.inputs)?, &test.targets)?;
                let status = if converged {
                    TrainStatus::Converged
                } else if loss < 10.0 * test_error {
                    TrainStatus::MaxStepsOk
                } else {
                    TrainStatus::Discard
                };
                return Ok(TrainOutcome { state: s, status, steps, train_loss: loss, test_error, lr });
            }
            Err(e @ VllError::Diverged { .. }) => {
                if halvings >= opts.max_halvings {
                    return Err(e);
                }
                halvings += 1;
                lr *= 0.5;
                log::debug!("diverged; retrying with lr = {lr}");
            }
            Err(e) => return Err(e),
        }
    }
}

fn descend(
    init: &MlpState,
    train: &SphereDataset,
    f0: &DVector<f64>,
    lr: f64,
    opts: TrainOptions,
) -> Result<(MlpState, usize, f64, bool)> {
    let mut s = init.clone();
    let mut step = 0;
    loop {
        let (loss, grads) = s.loss_grad_cached(&train.inputs, &train.targets, f0);
        if !loss.is_finite() {
            return Err(VllError::Diverged { step, loss });
        }
        if loss <= opts.threshold {
            return Ok((s, step, loss, true));
        }
        if step >= opts.max_steps {
            return Ok((s, step, loss, false));
        }
        for (w, g) in s.weights.iter_mut().zip(&grads) {
            w.zip_apply(g, |a, b| *a -= lr * b);
        }
        step += 1;
    }
}
