//! Experiment configuration (TOML). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VllError};
use crate::nn::AlphaMode;
use crate::theory::ASpec;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Theory,
    Mc,
    Train,
    Ensemble,
    Sweep,
    Phalf,
}

impl Mode {
    pub fn tag(self) -> &'static str {
        match self {
            Mode::Theory => "theory",
            Mode::Mc => "mc",
            Mode::Train => "train",
            Mode::Ensemble => "ensemble",
            Mode::Sweep => "sweep",
            Mode::Phalf => "phalf",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub mode: Mode,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub replication: ReplicationConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub toy: Option<ToyConfig>,
    #[serde(default)]
    pub phalf: Option<PhalfConfig>,
    #[serde(default)]
    pub artifacts: ArtifactConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub d: usize,
    pub k: usize,
    pub beta_norm: f64,
    pub n_test: usize,
    /// Monte Carlo points for the target normalizer.
    pub n_norm: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { d: 10, k: 2, beta_norm: 1.0, n_test: 1000, n_norm: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub p_values: Vec<f64>,
    pub n_values: Vec<usize>,
    pub alpha_values: Vec<f64>,
    pub depth: usize,
    pub alpha_mode: AlphaMode,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { p_values: vec![], n_values: vec![], alpha_values: vec![], depth: 3, alpha_mode: AlphaMode::WeightRescale }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplicationConfig {
    pub n_seeds: usize,
    pub n_datasets: usize,
}

impl Default for ReplicationConfig {
    fn default() -> Self {
        Self { n_seeds: 5, n_datasets: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrRule {
    /// base_lr · σ^{−2L} (weight rescaling) or base_lr / α² (output rescaling).
    SigmaRescale,
    /// base_lr · P / λ_max(eNTK₀ on the training set).
    AutoEntk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub ridge: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
    pub lr: f64,
    pub lr_rule: LrRule,
    pub threshold: f64,
    pub max_steps: usize,
    pub trials: usize,
    pub rank_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            ridge: 0.0,
            tol: 1e-12,
            max_iter: 100_000,
            damping: 0.5,
            lr: 1.0,
            lr_rule: LrRule::SigmaRescale,
            threshold: 1e-6,
            max_steps: 30_000,
            trials: 50,
            rank_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum SpectrumConfig {
    PowerLaw { m: usize, exponent: f64 },
    Explicit { eigenvalues: Vec<f64> },
    NtkGrid { d: usize, depth: usize, n_grid: usize },
    NtkSphere { d: usize, depth: usize, max_degree: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum TargetConfig {
    Ones,
    /// Unit-power target on a single mode.
    Mode { index: usize },
    /// Unit-power target on the first mode of a harmonic degree (sphere spectra).
    Degree { degree: usize },
    Explicit { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub spectrum: SpectrumConfig,
    #[serde(default = "default_target")]
    pub target: TargetConfig,
    #[serde(default = "default_a")]
    pub a: ASpec,
    /// Σ_ε eigenvalues; defaults to zero.
    #[serde(default)]
    pub noise: Option<Vec<f64>>,
}

fn default_target() -> TargetConfig {
    TargetConfig::Ones
}

fn default_a() -> ASpec {
    ASpec::Identity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    /// Kept modes; all of them when absent.
    #[serde(default)]
    pub keep_top: Option<usize>,
    pub noise_scale: f64,
    #[serde(default)]
    pub amplify: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveRef {
    pub n: usize,
    pub alpha: f64,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhalfConfig {
    #[serde(default)]
    pub curves: Vec<CurveRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArtifactConfig {
    pub save_predictions: bool,
    pub save_grams: bool,
    pub save_weights: bool,
}

impl Default for ArtifactConfig {
    fn default() -> Self {
        Self { save_predictions: true, save_grams: true, save_weights: false }
    }
}

fn increasing<T: PartialOrd>(name: &str, v: &[T]) -> Result<()> {
    if v.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(VllError::Config(format!("grid.{name} must be strictly increasing")));
    }
    Ok(())
}

fn nonempty<T>(name: &str, v: &[T]) -> Result<()> {
    if v.is_empty() {
        return Err(VllError::Config(format!("grid.{name} must not be empty in this mode")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| VllError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VllError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            VllError::Config(m) => VllError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical serialization, the input of the config hash.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(VllError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let g = &self.grid;
        increasing("p_values", &g.p_values)?;
        increasing("n_values", &g.n_values)?;
        increasing("alpha_values", &g.alpha_values)?;
        if g.p_values.iter().any(|p| !(*p > 0.0)) {
            return Err(VllError::Config("grid.p_values must be positive".into()));
        }
        if g.alpha_values.iter().any(|a| !(*a > 0.0)) {
            return Err(VllError::Config("grid.alpha_values must be positive".into()));
        }
        if self.replication.n_seeds < 1 || self.replication.n_datasets < 1 {
            return Err(VllError::Config("replication.n_seeds and n_datasets must be at least 1".into()));
        }
        let integral = || -> Result<()> {
            if g.p_values.iter().any(|p| p.fract() != 0.0) {
                return Err(VllError::Config("grid.p_values must be integers in this mode".into()));
            }
            Ok(())
        };
        match self.mode {
            Mode::Theory => {
                nonempty("p_values", &g.p_values)?;
                self.require_model()?;
            }
            Mode::Mc => {
                nonempty("p_values", &g.p_values)?;
                integral()?;
                self.require_model()?;
            }
            Mode::Train | Mode::Sweep | Mode::Ensemble => {
                nonempty("p_values", &g.p_values)?;
                nonempty("n_values", &g.n_values)?;
                nonempty("alpha_values", &g.alpha_values)?;
                integral()?;
                if g.depth < 2 {
                    return Err(VllError::Config("grid.depth must be at least 2".into()));
                }
                if self.task.n_test == 0 {
                    return Err(VllError::Config("task.n_test must be positive".into()));
                }
                if self.mode == Mode::Ensemble && self.replication.n_seeds < 2 {
                    return Err(VllError::Config("ensemble mode needs replication.n_seeds >= 2".into()));
                }
            }
            Mode::Phalf => {
                let from_curves = self.phalf.as_ref().is_some_and(|p| !p.curves.is_empty());
                if !from_curves {
                    nonempty("p_values", &g.p_values)?;
                    nonempty("n_values", &g.n_values)?;
                    if self.toy.is_none() {
                        return Err(VllError::Config("phalf mode needs either [phalf].curves or a [toy] section".into()));
                    }
                    self.require_model()?;
                }
            }
        }
        Ok(())
    }

    fn require_model(&self) -> Result<&ModelConfig> {
        self.model.as_ref().ok_or_else(|| VllError::Config(format!("mode {} needs a [model] section", self.mode.tag())))
    }
}
