//! Command-line runner: `vll <mode> --config run.toml [--out DIR] [--jobs N] [--seed S]`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure, 1 anything else.

pub mod config;
pub mod manifest;
pub mod runs;
pub mod table;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;

pub use config::{ExperimentConfig, Mode};
pub use manifest::RunManifest;

use crate::error::{Result, VllError};

#[derive(Debug, Parser)]
#[command(name = "vll", version, about = "Learning-curve theory and finite-width network experiments")]
pub struct Args {
    /// Which experiment to run; must match the config's `mode`.
    #[arg(value_enum)]
    pub mode: Mode,
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Master seed; overrides `master_seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Run a validated config, writing all outputs and the manifest under `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out)
        .map_err(|e| VllError::Io(std::io::Error::new(e.kind(), format!("cannot create {}: {e}", out.display()))))?;
    let started = Instant::now();
    let mut manifest = RunManifest::new(cfg);
    {
        let mut ctx = runs::RunContext { cfg, out, manifest: &mut manifest };
        runs::run_mode(&mut ctx)?;
    }
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    manifest.write(out)?;
    let extra: Vec<_> = manifest::list_files(out)?.into_iter().filter(|f| !manifest.files.contains(f)).collect();
    if !extra.is_empty() {
        log::warn!("output directory holds files from elsewhere: {extra:?}");
    }
    Ok(manifest)
}

fn exit_code(e: &VllError) -> i32 {
    match e {
        VllError::Config(_) | VllError::InvalidConfig(_) | VllError::InvalidDimension(_) | VllError::InvalidModel(_) => 2,
        e if e.is_numerical() => 3,
        _ => 1,
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("VLL_LOG", "error");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn execute(args: Args) -> Result<RunManifest> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if cfg.mode != args.mode {
        return Err(VllError::Config(format!(
            "config declares mode '{}' but the '{}' subcommand was given",
            cfg.mode.tag(),
            args.mode.tag()
        )));
    }
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    if let Some(o) = args.out {
        cfg.output_dir = Some(o);
    }
    let out = cfg.output_dir.clone().ok_or_else(|| VllError::Config("no output directory: pass --out or set output_dir".into()))?;
    if let Some(j) = args.jobs {
        if j == 0 {
            return Err(VllError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| VllError::Config(format!("cannot size the worker pool: {e}")))?;
    }
    run(&cfg, &out)
}

/// Entry point of the binary; returns the process exit code.
pub fn main_entry() -> i32 {
    init_logging();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(args) {
        Ok(m) => {
            log::info!("wrote {} files in {:.1}s", m.files.len(), m.wall_seconds);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
