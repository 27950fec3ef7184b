//! Mode implementations. Every cell's seed is derived from the master seed and
//! the cell's grid indices, so results do not depend on scheduling.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::config::{ExperimentConfig, LrRule, ModelConfig, Mode, SpectrumConfig, TargetConfig, ToyConfig};
use super::manifest::{CellSeed, Discard, RunManifest};
use super::table::{emit_csv, read_csv, Field, Schema};
use crate::blob::{write_blob, NamedArray};
use crate::ensemble::{decompose, ensemble_features, ensemble_kernels, p_half, GridMeta, PredictionGrid};
use crate::error::{Result, VllError};
use crate::kernels::{entk, mercer_features, FixedBasis};
use crate::nn::{auto_lr, init_mlp, train_full_batch, AlphaMode, MlpState, TrainOptions, TrainOutcome, TrainStatus};
use crate::regression::{fit, gen_error, predict};
use crate::rng::derive_seed;
use crate::taskgen::{SphereDataset, SphereTask};
use crate::theory::{
    build_toy, solve_fixed_a_opts, solve_quenched_gaussian_a_opts, ASpec, Amplification, SaddleSolution, SolverOptions,
    SpectralModel, SpectrumSource, ToyModel,
};

pub struct RunContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub out: &'a Path,
    pub manifest: &'a mut RunManifest,
}

impl RunContext<'_> {
    fn seed(&mut self, tag: &str, indices: &[u64], label: String) -> u64 {
        let s = derive_seed(self.cfg.master_seed, tag, indices);
        self.manifest.seeds.push(CellSeed { cell: label, seed: s });
        s
    }

    fn write_csv(&mut self, name: &str, rows: &[Vec<Field>], schema: Schema) -> Result<()> {
        emit_csv(&self.out.join(name), rows, schema)?;
        self.manifest.add_file(name);
        Ok(())
    }

    fn write_blob(&mut self, name: &str, arrays: &[NamedArray]) -> Result<()> {
        write_blob(&self.out.join(name), arrays)?;
        self.manifest.add_file(name);
        Ok(())
    }

    fn solver_opts(&self) -> SolverOptions {
        let s = &self.cfg.solver;
        SolverOptions { damping: s.damping, tol: s.tol, max_iter: s.max_iter }
    }
}

pub fn run_mode(ctx: &mut RunContext) -> Result<()> {
    match ctx.cfg.mode {
        Mode::Theory => run_theory(ctx),
        Mode::Mc => run_mc(ctx),
        Mode::Train => run_train(ctx).map(|_| ()),
        Mode::Sweep => {
            let curves = run_train(ctx)?;
            let rows = phalf_from_curves(&curves)?;
            ctx.write_csv("phalf.csv", &rows, Schema::Phalf)
        }
        Mode::Ensemble => run_ensemble(ctx),
        Mode::Phalf => run_phalf(ctx),
    }
}

fn spectrum_source(spec: &SpectrumConfig, seed: u64) -> SpectrumSource {
    match spec {
        SpectrumConfig::PowerLaw { m, exponent } => {
            SpectrumSource::Explicit((1..=*m).map(|k| (k as f64).powf(-exponent)).collect())
        }
        SpectrumConfig::Explicit { eigenvalues } => SpectrumSource::Explicit(eigenvalues.clone()),
        SpectrumConfig::NtkGrid { d, depth, n_grid } => {
            SpectrumSource::NtkGrid { d: *d, depth: *depth, n_grid: *n_grid, seed }
        }
        SpectrumConfig::NtkSphere { d, depth, max_degree } => {
            SpectrumSource::NtkSphere { d: *d, depth: *depth, max_degree: *max_degree }
        }
    }
}

/// The covariate model described by a `[model]` section.
pub fn build_model(mc: &ModelConfig, seed: u64) -> Result<SpectralModel> {
    let src = spectrum_source(&mc.spectrum, seed);
    let eigs = src.eigenvalues()?;
    let m = eigs.len();
    let wstar = match &mc.target {
        TargetConfig::Ones => vec![1.0; m],
        TargetConfig::Mode { .. } | TargetConfig::Degree { .. } => {
            let index = &resolve_mode(&src, &mc.target)?;
            if *index >= m {
                return Err(VllError::Config(format!("model.target.index {index} out of range for M = {m}")));
            }
            let mut w = vec![0.0; m];
            w[*index] = (m as f64 / eigs[*index]).sqrt();
            w
        }
        TargetConfig::Explicit { values } => values.clone(),
    };
    let n_h = match &mc.a {
        ASpec::Identity => m,
        ASpec::Diagonal { scales } => scales.len(),
        ASpec::Projection { keep_top } => *keep_top,
        ASpec::Gaussian { eta, .. } => (eta * m as f64).round() as usize,
    };
    let noise = mc.noise.clone().unwrap_or_else(|| vec![0.0; n_h]);
    SpectralModel::new(eigs, wstar, noise, mc.a.clone())
}

fn resolve_mode(src: &SpectrumSource, target: &TargetConfig) -> Result<usize> {
    match target {
        TargetConfig::Mode { index } => Ok(*index),
        TargetConfig::Degree { degree } => src.degree_index(*degree),
        _ => Err(VllError::Config("toy models need a single-mode target (kind = \"mode\" or \"degree\")".into())),
    }
}

fn build_toy_model(cfg: &ExperimentConfig, toy: &ToyConfig, noise_scale: f64) -> Result<ToyModel> {
    let mc = cfg.model.as_ref().ok_or_else(|| VllError::Config("[toy] needs a [model] section for its spectrum".into()))?;
    let src = spectrum_source(&mc.spectrum, derive_seed(cfg.master_seed, "spectrum", &[]));
    let mode = resolve_mode(&src, &mc.target)?;
    build_toy(&src, toy.keep_top, noise_scale, mode, toy.amplify.map(|coef| Amplification { coef }))
}

/// Solve the configured theory at sample size `p`.
pub fn theory_point(model: &SpectralModel, p: f64, ridge: f64, opts: SolverOptions) -> Result<SaddleSolution> {
    let load = p / model.m as f64;
    if model.is_structured() {
        solve_fixed_a_opts(model, load, ridge, opts)
    } else {
        solve_quenched_gaussian_a_opts(model, load, ridge, opts)
    }
}

fn toy_point(toy: &ToyModel, p: f64, ridge: f64, opts: SolverOptions) -> Result<SaddleSolution> {
    theory_point(&toy.model_at(p), p, ridge, opts)
}

fn theory_row(p: f64, s: &SaddleSolution) -> Vec<Field> {
    vec![
        p.into(),
        s.q.into(),
        s.q_hat.into(),
        s.gamma.into(),
        s.v.into(),
        s.v_hat.into(),
        s.eg.into(),
        s.iterations.into(),
        s.residual.into(),
    ]
}

fn run_theory(ctx: &mut RunContext) -> Result<()> {
    let cfg = ctx.cfg;
    let opts = ctx.solver_opts();
    let ridge = cfg.solver.ridge;
    let rows: Vec<Vec<Field>> = if let Some(toy) = &cfg.toy {
        let t = build_toy_model(cfg, toy, toy.noise_scale)?;
        cfg.grid.p_values.iter().map(|&p| toy_point(&t, p, ridge, opts).map(|s| theory_row(p, &s))).collect::<Result<_>>()?
    } else {
        let model = build_model(cfg.model.as_ref().expect("validated"), derive_seed(cfg.master_seed, "spectrum", &[]))?;
        cfg.grid.p_values.iter().map(|&p| theory_point(&model, p, ridge, opts).map(|s| theory_row(p, &s))).collect::<Result<_>>()?
    };
    ctx.write_csv("theory.csv", &rows, Schema::Theory)
}

fn run_mc(ctx: &mut RunContext) -> Result<()> {
    let cfg = ctx.cfg;
    let model = match &cfg.toy {
        Some(toy) if toy.amplify.is_some() => {
            return Err(VllError::Config("mc mode does not support amplified toy models".into()));
        }
        Some(toy) => build_toy_model(cfg, toy, toy.noise_scale)?.base,
        None => build_model(cfg.model.as_ref().expect("validated"), derive_seed(cfg.master_seed, "spectrum", &[]))?,
    };
    let ps: Vec<usize> = cfg.grid.p_values.iter().map(|p| *p as usize).collect();
    let seed = ctx.seed("mc", &[], "mc".into());
    let (means, stds) = crate::theory::mc_learning_curve(&model, &ps, cfg.solver.ridge, cfg.solver.trials, seed)?;
    let opts = ctx.solver_opts();
    let mut rows = Vec::with_capacity(ps.len());
    for (i, &p) in ps.iter().enumerate() {
        let th = theory_point(&model, p as f64, cfg.solver.ridge, opts)?;
        rows.push(vec![p.into(), means[i].into(), stds[i].into(), th.eg.into()]);
    }
    ctx.write_csv("mc.csv", &rows, Schema::Mc)
}

/// Sphere task fixed by the master seed, with its shared test set.
pub fn experiment_task(cfg: &ExperimentConfig) -> Result<(SphereTask, SphereDataset)> {
    let t = &cfg.task;
    let task = SphereTask::new(t.d, t.k, t.beta_norm, t.n_norm, derive_seed(cfg.master_seed, "task", &[]))?;
    let test = task.sample(t.n_test, derive_seed(cfg.master_seed, "test", &[]))?;
    Ok((task, test))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemberSpec {
    pub depth: usize,
    pub width: usize,
    pub alpha: f64,
    pub alpha_mode: AlphaMode,
    pub base_lr: f64,
    pub lr_rule: LrRule,
    pub threshold: f64,
    pub max_steps: usize,
}

impl MemberSpec {
    pub fn from_config(cfg: &ExperimentConfig, width: usize, alpha: f64) -> Self {
        MemberSpec {
            depth: cfg.grid.depth,
            width,
            alpha,
            alpha_mode: cfg.grid.alpha_mode,
            base_lr: cfg.solver.lr,
            lr_rule: cfg.solver.lr_rule,
            threshold: cfg.solver.threshold,
            max_steps: cfg.solver.max_steps,
        }
    }
}

/// Initialize and train one network.
pub fn train_member(spec: &MemberSpec, train: &SphereDataset, test: &SphereDataset, init_seed: u64) -> Result<TrainOutcome> {
    let net = init_mlp(train.inputs.ncols(), spec.depth, spec.width, spec.alpha, spec.alpha_mode, init_seed)?;
    let lr = match spec.lr_rule {
        LrRule::SigmaRescale => net.default_lr(spec.base_lr),
        LrRule::AutoEntk => auto_lr(&net, train, spec.base_lr)?,
    };
    let mut opts = TrainOptions::new(lr);
    opts.threshold = spec.threshold;
    opts.max_steps = spec.max_steps;
    train_full_batch(&net, train, test, opts)
}

struct CellResult {
    curve_row: Vec<Field>,
    ensembled: f64,
    single: f64,
}

fn fmt_alpha(a: f64) -> String {
    format!("{a}")
}

fn run_train(ctx: &mut RunContext) -> Result<Vec<(usize, f64, PathBuf)>> {
    let cfg = ctx.cfg;
    let (task, test) = experiment_task(cfg)?;
    let (s_n, d_n) = (cfg.replication.n_seeds, cfg.replication.n_datasets);
    let mut curves = vec![];
    for (ni, &n) in cfg.grid.n_values.iter().enumerate() {
        for &alpha in &cfg.grid.alpha_values {
            let spec = MemberSpec::from_config(cfg, n, alpha);
            let mut rows = vec![];
            for (pi, &pf) in cfg.grid.p_values.iter().enumerate() {
                let p = pf as usize;
                let label = format!("n{n}_a{}_p{p}", fmt_alpha(alpha));
                let init_seeds: Vec<u64> =
                    (0..s_n).map(|s| ctx.seed("train/init", &[ni as u64, s as u64], format!("{label}/init{s}"))).collect();
                let data_seeds: Vec<u64> =
                    (0..d_n).map(|d| ctx.seed("train/data", &[pi as u64, d as u64], format!("{label}/data{d}"))).collect();
                let res = train_cell(ctx, &spec, &task, &test, p, &init_seeds, &data_seeds, &label)?;
                rows.push(res.curve_row);
                log::info!("{label}: single {:.4e}, ensembled {:.4e}", res.single, res.ensembled);
            }
            let name = format!("curve_n{n}_a{}.csv", fmt_alpha(alpha));
            ctx.write_csv(&name, &rows, Schema::Curve)?;
            curves.push((n, alpha, ctx.out.join(&name)));
        }
    }
    Ok(curves)
}

#[allow(clippy::too_many_arguments)]
fn train_cell(
    ctx: &mut RunContext,
    spec: &MemberSpec,
    task: &SphereTask,
    test: &SphereDataset,
    p: usize,
    init_seeds: &[u64],
    data_seeds: &[u64],
    label: &str,
) -> Result<CellResult> {
    let (s_n, d_n) = (init_seeds.len(), data_seeds.len());
    let datasets: Vec<SphereDataset> = data_seeds.iter().map(|&s| task.sample(p, s)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..s_n).flat_map(|s| (0..d_n).map(move |d| (s, d))).collect();
    let outcomes: Vec<Result<TrainOutcome>> =
        jobs.par_iter().map(|&(s, d)| train_member(spec, &datasets[d], test, init_seeds[s])).collect();

    let mut keep = vec![true; s_n];
    let mut preds = vec![vec![DVector::zeros(0); d_n]; s_n];
    let mut first: Option<MlpState> = None;
    for (&(s, d), out) in jobs.iter().zip(outcomes) {
        let reason = match out {
            Ok(o) if o.status != TrainStatus::Discard => {
                preds[s][d] = o.state.centered_output(&test.inputs)?;
                if s == 0 && d == 0 {
                    first = Some(o.state);
                }
                None
            }
            Ok(o) => Some(format!("train loss {:.3e} not below 10x test error {:.3e}", o.train_loss, o.test_error)),
            Err(e) if e.is_numerical() => Some(e.to_string()),
            Err(e) => return Err(e),
        };
        if let Some(reason) = reason {
            keep[s] = false;
            ctx.manifest.discards.push(Discard { cell: label.to_string(), seed_index: s, dataset_index: d, reason });
        }
    }
    let cells: Vec<Vec<DVector<f64>>> = preds.into_iter().zip(&keep).filter(|(_, k)| **k).map(|(r, _)| r).collect();
    let meta = GridMeta { p, n: spec.width, alpha: spec.alpha, k: task.degree_k };
    if cells.is_empty() {
        let nan = f64::NAN;
        return Ok(CellResult {
            curve_row: vec![p.into(), nan.into(), nan.into(), nan.into(), Field::Missing, Field::Missing, Field::Missing, Field::Missing],
            ensembled: nan,
            single: nan,
        });
    }
    let grid = PredictionGrid::new(&cells, test.targets.clone(), meta)?;
    let errs = grid.member_errors();
    let single = errs.mean();
    let std = if errs.len() > 1 { errs.variance() * errs.len() as f64 / (errs.len() - 1) as f64 } else { 0.0 }.sqrt();
    let ensembled = grid.ensembled_error();
    let dec = decompose(&grid).ok();
    let opt = |f: fn(&crate::ensemble::VarianceDecomposition) -> f64| dec.as_ref().map(f).into();
    let curve_row = vec![
        p.into(),
        single.into(),
        std.into(),
        ensembled.into(),
        opt(|d| d.bias_sq),
        opt(|d| d.v_init),
        opt(|d| d.v_dataset),
        opt(|d| d.v_cross),
    ];

    let arts = ctx.cfg.artifacts.clone();
    if arts.save_predictions {
        let t = test.len();
        let flat: Vec<f64> = cells.iter().flat_map(|r| r.iter().flat_map(|v| v.iter().copied())).collect();
        let rows = flat.len() / t;
        let arrays = vec![
            NamedArray { name: "predictions".into(), shape: vec![rows, t], data: flat },
            NamedArray { name: "targets".into(), shape: vec![t], data: test.targets.iter().copied().collect() },
        ];
        ctx.write_blob(&format!("pred_{label}.bin"), &arrays)?;
    }
    if let Some(state) = first {
        if arts.save_grams {
            let init = {
                let mut s0 = state.clone();
                s0.weights = state.init_weights().to_vec();
                s0
            };
            let k0 = entk(&init, &test.inputs, &test.inputs)?;
            let kf = entk(&state, &test.inputs, &test.inputs)?;
            let arrays = vec![NamedArray::from_matrix("entk0", &k0.matrix), NamedArray::from_matrix("entkf", &kf.matrix)];
            ctx.write_blob(&format!("gram_{label}.bin"), &arrays)?;
        }
        if arts.save_weights {
            ctx.write_blob(&format!("weights_{label}.bin"), &state.to_arrays())?;
        }
    }
    Ok(CellResult { curve_row, ensembled, single })
}

fn run_phalf(ctx: &mut RunContext) -> Result<()> {
    let cfg = ctx.cfg;
    let rows = if let Some(pc) = cfg.phalf.as_ref().filter(|p| !p.curves.is_empty()) {
        let curves: Vec<(usize, f64, PathBuf)> = pc.curves.iter().map(|c| (c.n, c.alpha, c.path.clone())).collect();
        phalf_from_curves(&curves)?
    } else {
        let toy = cfg.toy.as_ref().expect("validated");
        let opts = ctx.solver_opts();
        let ps = &cfg.grid.p_values;
        let mut rows = vec![];
        for &n in &cfg.grid.n_values {
            let noisy = build_toy_model(cfg, toy, toy.noise_scale / n as f64)?;
            let clean = noisy.noiseless();
            let single: Vec<f64> = ps.iter().map(|&p| toy_point(&noisy, p, cfg.solver.ridge, opts).map(|s| s.eg)).collect::<Result<_>>()?;
            let ens: Vec<f64> = ps.iter().map(|&p| toy_point(&clean, p, cfg.solver.ridge, opts).map(|s| s.eg)).collect::<Result<_>>()?;
            rows.push(phalf_row(n, None, p_half(ps, &single, &ens)?));
        }
        rows
    };
    ctx.write_csv("phalf.csv", &rows, Schema::Phalf)
}

fn phalf_row(n: usize, alpha: Option<f64>, ph: Option<crate::ensemble::PHalf>) -> Vec<Field> {
    vec![
        n.into(),
        alpha.into(),
        ph.map(|h| h.p_half).into(),
        ph.map(|h| h.bracket_lo).into(),
        ph.map(|h| h.bracket_hi).into(),
    ]
}

fn phalf_from_curves(curves: &[(usize, f64, PathBuf)]) -> Result<Vec<Vec<Field>>> {
    let mut rows = vec![];
    for (n, alpha, path) in curves {
        let table = read_csv(path, Schema::Curve)?;
        let col = |i: usize| table.iter().map(|r| r[i].as_f64().unwrap_or(f64::NAN)).collect::<Vec<f64>>();
        let (ps, single, ens) = (col(0), col(1), col(3));
        let usable: Vec<usize> = (0..ps.len()).filter(|&i| single[i] > 0.0 && ens[i] > 0.0).collect();
        let pick = |v: &[f64]| usable.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let ph = if usable.len() >= 2 { p_half(&pick(&ps), &pick(&single), &pick(&ens))? } else { None };
        rows.push(phalf_row(*n, Some(*alpha), ph));
    }
    Ok(rows)
}

/// Test errors of the three ensembling strategies for one (P, N, α) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodErrors {
    pub single: f64,
    pub prediction_avg: f64,
    pub kernel_avg: f64,
    pub feature_avg: f64,
}

/// Train `init_seeds.len()` networks on one dataset and compare averaging the
/// predictions, the final tangent kernels, and the square-root features.
pub fn compare_methods(
    spec: &MemberSpec,
    train: &SphereDataset,
    test: &SphereDataset,
    init_seeds: &[u64],
    ridge: f64,
    rank_tol: f64,
) -> Result<(MethodErrors, Vec<TrainOutcome>)> {
    let outcomes: Vec<TrainOutcome> =
        init_seeds.par_iter().map(|&s| train_member(spec, train, test, s)).collect::<Result<_>>()?;
    let p = train.len();
    let grid_x = DMatrix::from_fn(p + test.len(), train.inputs.ncols(), |i, j| {
        if i < p {
            train.inputs[(i, j)]
        } else {
            test.inputs[(i - p, j)]
        }
    });
    let tr: Vec<usize> = (0..p).collect();
    let te: Vec<usize> = (p..p + test.len()).collect();

    let preds: Vec<DVector<f64>> = outcomes.iter().map(|o| o.state.centered_output(&test.inputs)).collect::<Result<_>>()?;
    let single = preds.iter().map(|f| gen_error(f, &test.targets)).sum::<Result<f64>>()? / preds.len() as f64;
    let mean_pred = preds.iter().fold(DVector::zeros(test.len()), |a, f| a + f) / preds.len() as f64;
    let prediction_avg = gen_error(&mean_pred, &test.targets)?;

    let grams: Vec<_> = outcomes.iter().map(|o| entk(&o.state, &grid_x, &grid_x)).collect::<Result<_>>()?;
    let regress = |k: &crate::kernels::GramKernel| -> Result<f64> {
        let f = fit(&k.select(&tr, &tr), &train.targets, ridge)?;
        gen_error(&predict(&f, &k.select(&te, &tr).matrix)?, &test.targets)
    };
    let kernel_avg = regress(&ensemble_kernels(&grams)?)?;

    let first = &outcomes[0].state;
    let basis = FixedBasis::ntk_reference(&grid_x, first.depth, first.sigma)?;
    let maps: Vec<_> = grams.iter().map(|k| mercer_features(k, &basis, rank_tol)).collect::<Result<_>>()?;
    let feature_avg = regress(&ensemble_features(&maps)?.gram())?;
    Ok((MethodErrors { single, prediction_avg, kernel_avg, feature_avg }, outcomes))
}

fn run_ensemble(ctx: &mut RunContext) -> Result<()> {
    let cfg = ctx.cfg;
    let (task, test) = experiment_task(cfg)?;
    let mut rows = vec![];
    for (ni, &n) in cfg.grid.n_values.iter().enumerate() {
        for &alpha in &cfg.grid.alpha_values {
            let spec = MemberSpec::from_config(cfg, n, alpha);
            for (pi, &pf) in cfg.grid.p_values.iter().enumerate() {
                let p = pf as usize;
                let label = format!("n{n}_a{}_p{p}", fmt_alpha(alpha));
                let train = task.sample(p, ctx.seed("ensemble/data", &[pi as u64], format!("{label}/data")))?;
                let seeds: Vec<u64> = (0..cfg.replication.n_seeds)
                    .map(|s| ctx.seed("ensemble/init", &[ni as u64, s as u64], format!("{label}/init{s}")))
                    .collect();
                let (m, outs) = compare_methods(&spec, &train, &test, &seeds, cfg.solver.ridge, cfg.solver.rank_tol)?;
                for (s, o) in outs.iter().enumerate() {
                    if o.status == TrainStatus::Discard {
                        ctx.manifest.discards.push(Discard {
                            cell: label.clone(),
                            seed_index: s,
                            dataset_index: 0,
                            reason: "train loss not below 10x test error (kept for method comparison)".into(),
                        });
                    }
                }
                rows.push(vec![
                    p.into(),
                    n.into(),
                    alpha.into(),
                    m.single.into(),
                    m.prediction_avg.into(),
                    m.kernel_avg.into(),
                    m.feature_avg.into(),
                ]);
            }
        }
    }
    ctx.write_csv("methods.csv", &rows, Schema::Methods)
}
