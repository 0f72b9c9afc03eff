//! Command-line front end. Every command reads a self-contained JSON run
//! config or explicit flags, writes its artifacts, and maps failures onto
//! exit codes: 0 success, 1 check failed, 2 configuration or I/O error,
//! 3 numerical abort, 4 contract violation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    compute_kappa, twin_trajectory_experiment, ForgettingCurve, MemorySummary, NonExpansiveAudit, TwinSetup,
};
use crate::data::{gen_synthetic, load_csv, save_csv, DataManifest, SeriesDataset, SplitFractions, SyntheticKind};
use crate::encoder::FreezeScheme;
use crate::error::{Error, Result};
use crate::model::{FreezeTst, ModelConfig};
use crate::reservoir::{RecurrentScaling, ReservoirActivation, ReservoirConfig};
use crate::tensor::{Rng, SeedTree};
use crate::trainer::{
    evaluate, persistence_metrics, prepare_data, train_prepared, Metrics, TrainConfig, TrainingReport,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_CONTRACT: u8 = 4;

/// Non-expansiveness tolerance used by `verify-lipschitz`.
pub const LIPSCHITZ_TOL: f64 = 1e-3;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical { .. } | Error::NonFinite { .. } => EXIT_NUMERICAL,
        Error::Contract(_) => EXIT_CONTRACT,
        Error::Shape { .. }
        | Error::Config { .. }
        | Error::Parse { .. }
        | Error::Io { .. }
        | Error::Json(_)
        | Error::NoForgetting { .. } => EXIT_CONFIG,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        kind: SyntheticKind,
        timesteps: usize,
        channels: usize,
        #[serde(default)]
        noise_std: f64,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        date_column: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

/// One document describing a run. The root seed is split into `data`,
/// `init` and `shuffle` streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSource,
    #[serde(default)]
    pub splits: SplitFractions,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| prefix("model", e))?;
        self.train.validate().map_err(|e| prefix("train", e))?;
        self.splits.validate().map_err(|e| prefix("splits", e))?;
        if let DataSource::Synthetic { timesteps, channels, noise_std, .. } = self.data {
            if timesteps == 0 {
                return Err(Error::config("data.timesteps", "must be at least 1"));
            }
            if channels == 0 {
                return Err(Error::config("data.channels", "must be at least 1"));
            }
            if !(noise_std >= 0.0) {
                return Err(Error::config("data.noise_std", "must be non-negative"));
            }
        }
        if self.sweep.seeds.is_empty() {
            return Err(Error::config("sweep.seeds", "need at least one seed"));
        }
        Ok(())
    }

    pub fn seeds(&self) -> SeedTree {
        SeedTree::new(self.seed)
    }

    pub fn dataset(&self) -> Result<SeriesDataset> {
        let mut ds = match &self.data {
            DataSource::Synthetic { kind, timesteps, channels, noise_std } => {
                gen_synthetic(*kind, *timesteps, *channels, *noise_std, self.seeds().seed("data"))?
            }
            DataSource::Csv { path, date_column } => load_csv(path, *date_column)?,
        };
        ds.splits = self.splits;
        Ok(ds)
    }

    /// Training settings for a run whose model and shuffles use `seed`.
    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed: SeedTree::new(seed).seed("shuffle"), ..self.train.clone() }
    }
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config { field, reason } => Error::Config { field: format!("{section}.{field}"), reason },
        e => e,
    }
}

#[derive(Debug, Parser)]
#[command(name = "freezetst", version, about = "Frozen-layer patch transformer forecaster")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model; writes report.json, curves.csv and checkpoint.json.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the test split of a run config's data.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Closed-form forgetting bound and twin-trajectory experiment.
    AnalyzeMemory {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        lambda: f64,
        #[arg(long, default_value_t = 1.0)]
        l_phi: f64,
        #[arg(long, default_value_t = 1e-2)]
        eps: f64,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long, default_value_t = 200)]
        t_max: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        input_dim: usize,
        #[arg(long, default_value_t = 1.0)]
        perturb: f64,
        #[arg(long, default_value = "memory")]
        out: PathBuf,
    },
    /// Empirical Lipschitz and gradient-norm audit of a checkpoint's encoder.
    VerifyLipschitz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        probes: usize,
        #[arg(long, default_value_t = 100)]
        grad_probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every named freeze scheme over the configured seeds.
    SweepSchemes {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a synthetic dataset as CSV plus a `.manifest.json` beside it.
    GenData {
        #[arg(long, default_value = "sines")]
        kind: SyntheticKind,
        #[arg(long, default_value_t = 1000)]
        timesteps: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 0.0)]
        noise_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs a parsed command and returns its exit code; errors are printed.
pub fn run(cli: Cli) -> u8 {
    let result = match cli.command {
        Command::Train { config } => cmd_train(&config),
        Command::Evaluate { checkpoint, config } => cmd_evaluate(&checkpoint, &config),
        Command::AnalyzeMemory { alpha, lambda, l_phi, eps, seeds, t_max, size, input_dim, perturb, out } => {
            let args = MemoryArgs { alpha, lambda, l_phi, eps, seeds, t_max, size, input_dim, perturb };
            cmd_analyze_memory(&args, &out)
        }
        Command::VerifyLipschitz { checkpoint, probes, grad_probes, seed } => {
            cmd_verify_lipschitz(&checkpoint, probes, grad_probes, seed)
        }
        Command::SweepSchemes { config } => cmd_sweep_schemes(&config),
        Command::GenData { kind, timesteps, channels, noise_std, seed, out } => {
            cmd_gen_data(kind, timesteps, channels, noise_std, seed, &out)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

pub fn cmd_train(config: &Path) -> Result<u8> {
    let cfg = RunConfig::load(config)?;
    let ds = cfg.dataset()?;
    let mut model = FreezeTst::new(cfg.model.clone(), cfg.seed)?;
    let data = prepare_data(&model, &ds)?;
    create_dir(&cfg.output_dir)?;
    let report = train_prepared(&mut model, &data, &cfg.train_for(cfg.seed))?;
    report.write_json(&cfg.output_dir.join("report.json"))?;
    report.write_curves_csv(&cfg.output_dir.join("curves.csv"))?;
    model.save_checkpoint(&cfg.output_dir.join("checkpoint.json"))?;
    println!(
        "{}: test mse {:.6} mae {:.6} (persistence mse {:.6}); trainable {} / {} params",
        report.scheme,
        report.test.mse,
        report.test.mae,
        report.persistence.mse,
        report.trainable_params,
        report.total_params
    );
    Ok(EXIT_OK)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Evaluation {
    pub checkpoint: PathBuf,
    pub scheme: String,
    pub test: Metrics,
    pub persistence: Metrics,
}

pub fn cmd_evaluate(checkpoint: &Path, config: &Path) -> Result<u8> {
    let cfg = RunConfig::load(config)?;
    let model = FreezeTst::load_checkpoint(checkpoint)?;
    let data = prepare_data(&model, &cfg.dataset()?)?;
    let eval = Evaluation {
        checkpoint: checkpoint.to_path_buf(),
        scheme: model.config.scheme.to_string(),
        test: evaluate(&model, &data.test)?,
        persistence: persistence_metrics(&data.test)?,
    };
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("evaluation.json"), &eval)?;
    println!(
        "{}: test mse {:.6} mae {:.6} (persistence mse {:.6})",
        eval.scheme, eval.test.mse, eval.test.mae, eval.persistence.mse
    );
    Ok(EXIT_OK)
}

#[derive(Clone, Copy, Debug)]
pub struct MemoryArgs {
    pub alpha: f64,
    pub lambda: f64,
    pub l_phi: f64,
    pub eps: f64,
    pub seeds: usize,
    pub t_max: usize,
    pub size: usize,
    pub input_dim: usize,
    pub perturb: f64,
}

impl MemoryArgs {
    pub fn reservoir(&self) -> ReservoirConfig {
        let activation = if self.l_phi == 1.0 {
            ReservoirActivation::Tanh
        } else {
            ReservoirActivation::ScaledTanh { gain: self.l_phi }
        };
        ReservoirConfig {
            size: self.size,
            alpha: self.alpha,
            leak: self.lambda,
            activation,
            input_scale: 1.0,
            scaling: RecurrentScaling::Norm,
            seed: 0,
        }
    }
}

/// Writes `forgetting_curve.csv` (the seed closest to its bound),
/// `forgetting_curves.csv` (every seed) and `memory_summary.json`.
pub fn cmd_analyze_memory(args: &MemoryArgs, out: &Path) -> Result<u8> {
    let cfg = args.reservoir();
    cfg.validate_shape()?;
    if args.seeds == 0 {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    let kappa = compute_kappa(args.alpha, args.lambda, args.l_phi);
    if kappa >= 1.0 {
        log::warn!("kappa = {kappa} >= 1: no forgetting guarantee, the bound does not decay");
        eprintln!("warning: kappa = {kappa} >= 1, no forgetting guarantee");
    }
    let seeds: Vec<u64> = (0..args.seeds as u64).collect();
    let setup = TwinSetup { input_dim: args.input_dim, perturb_mag: args.perturb, t_max: args.t_max };
    let curves = twin_trajectory_experiment(&cfg, setup, &seeds)?;
    let summary = MemorySummary::from_curves(args.alpha, args.lambda, args.l_phi, args.eps, &curves);

    create_dir(out)?;
    let worst = curves.iter().max_by(|a, b| a.tightness().total_cmp(&b.tightness())).expect("at least one seed");
    worst.write_csv(&out.join("forgetting_curve.csv"))?;
    write_all_curves(&curves, &out.join("forgetting_curves.csv"))?;
    write_json(&out.join("memory_summary.json"), &summary)?;

    let show = |l: Option<usize>| l.map_or_else(|| "undefined".to_string(), |v| v.to_string());
    println!("kappa = {}", pretty(kappa));
    println!("L_eff(eps={}, C=1) = {}", args.eps, show(summary.l_eff_unit));
    println!("C = {:.6}, L_eff(eps={}, C) = {}", summary.c, args.eps, show(summary.l_eff));
    println!("max first crossing = {}, violations = {}", show(summary.max_first_crossing), summary.violations);
    Ok(if summary.violations == 0 { EXIT_OK } else { EXIT_CHECK_FAILED })
}

/// Shortest decimal that survives rounding noise in the last places.
fn pretty(v: f64) -> String {
    let s = format!("{v:.12}");
    let s = s.trim_end_matches('0');
    s.trim_end_matches('.').to_string()
}

fn write_all_curves(curves: &[ForgettingCurve], path: &Path) -> Result<()> {
    let mut s = String::from("seed,tau,divergence,bound\n");
    for c in curves {
        for ((t, d), b) in c.taus.iter().zip(&c.divergences).zip(&c.bound) {
            let _ = writeln!(s, "{},{t},{},{}", c.seed, crate::data::format_f64(*d), crate::data::format_f64(*b));
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LipschitzVerdict {
    pub audit: NonExpansiveAudit,
    pub tolerance: f64,
    pub gammas: Vec<f64>,
    pub passed: bool,
}

/// Audits the encoder composition of a checkpoint on `[N, d_model]` inputs.
pub fn verify_lipschitz(model: &FreezeTst, probes: usize, grad_probes: usize, seed: u64) -> Result<LipschitzVerdict> {
    if let Some(i) = model.stack.blocks.iter().position(|b| b.frozen && !b.rescaled) {
        return Err(Error::Contract(format!(
            "frozen block {} was never rescaled; rebuild the model or rescale its frozen blocks before auditing",
            i + 1
        )));
    }
    let shape = [model.config.patch.num_patches(), model.config.patch.d_model];
    let audit = NonExpansiveAudit::run(&model.stack, &shape, probes, grad_probes, &mut Rng::new(seed))?;
    Ok(LipschitzVerdict {
        passed: audit.passes(LIPSCHITZ_TOL),
        tolerance: LIPSCHITZ_TOL,
        gammas: model.stack.gammas(),
        audit,
    })
}

pub fn cmd_verify_lipschitz(checkpoint: &Path, probes: usize, grad_probes: usize, seed: u64) -> Result<u8> {
    let model = FreezeTst::load_checkpoint(checkpoint)?;
    let v = verify_lipschitz(&model, probes, grad_probes, seed)?;
    println!(
        "lipschitz estimate {:.6} over {} pairs; max gradient ratio {:.6} over {} probes; {}",
        v.audit.lipschitz,
        v.audit.pairs,
        v.audit.max_gradient_ratio,
        v.audit.gradient_probes,
        if v.passed { "pass" } else { "FAIL" }
    );
    println!("{}", serde_json::to_string(&v)?);
    Ok(if v.passed { EXIT_OK } else { EXIT_CHECK_FAILED })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scheme: String,
    pub seed: u64,
    pub test_mse: f64,
    pub test_mae: f64,
    pub persistence_mse: f64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub trainable_ratio: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub epoch_seconds_median: f64,
}

impl SweepRow {
    pub fn from_report(r: &TrainingReport, seed: u64) -> Self {
        Self {
            scheme: r.scheme.clone(),
            seed,
            test_mse: r.test.mse,
            test_mae: r.test.mae,
            persistence_mse: r.persistence.mse,
            trainable_params: r.trainable_params,
            total_params: r.total_params,
            trainable_ratio: r.params.ratio,
            epochs: r.epochs.len(),
            best_epoch: r.best_epoch,
            epoch_seconds_median: r.timing.median,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub scheme: String,
    pub median_test_mse: f64,
    pub median_test_mae: f64,
    pub trainable_ratio: f64,
    pub median_epoch_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SchemeSummary>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl SweepResult {
    pub fn summary_for(&self, scheme: &str) -> Option<&SchemeSummary> {
        self.summary.iter().find(|s| s.scheme == scheme)
    }

    /// One row per scheme and seed; clock columns excluded.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scheme,seed,test_mse,test_mae,persistence_mse,trainable_params,total_params,trainable_ratio,epochs,best_epoch\n");
        let f = crate::data::format_f64;
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.scheme,
                r.seed,
                f(r.test_mse),
                f(r.test_mae),
                f(r.persistence_mse),
                r.trainable_params,
                r.total_params,
                f(r.trainable_ratio),
                r.epochs,
                r.best_epoch
            );
        }
        s
    }
}

/// Trains `schemes` × `cfg.sweep.seeds` on one dataset drawn from the
/// run's root seed. Each sweep seed drives model init and shuffling.
pub fn sweep_schemes(cfg: &RunConfig, schemes: &[FreezeScheme]) -> Result<SweepResult> {
    let ds = cfg.dataset()?;
    let mut rows = Vec::new();
    for scheme in schemes {
        for &seed in &cfg.sweep.seeds {
            let model_cfg = ModelConfig { scheme: scheme.clone(), ..cfg.model.clone() };
            let mut model = FreezeTst::new(model_cfg, seed)?;
            let data = prepare_data(&model, &ds)?;
            let report = train_prepared(&mut model, &data, &cfg.train_for(seed))?;
            log::info!("{scheme} seed {seed}: test mse {:.6}", report.test.mse);
            rows.push(SweepRow::from_report(&report, seed));
        }
    }
    let summary = schemes
        .iter()
        .map(|s| {
            let name = s.to_string();
            let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.scheme == name).collect();
            let col = |f: fn(&SweepRow) -> f64| median(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            SchemeSummary {
                median_test_mse: col(|r| r.test_mse),
                median_test_mae: col(|r| r.test_mae),
                trainable_ratio: mine[0].trainable_ratio,
                median_epoch_seconds: col(|r| r.epoch_seconds_median),
                scheme: name,
            }
        })
        .collect();
    Ok(SweepResult { rows, summary })
}

pub fn cmd_sweep_schemes(config: &Path) -> Result<u8> {
    let cfg = RunConfig::load(config)?;
    let result = sweep_schemes(&cfg, &FreezeScheme::NAMED)?;
    create_dir(&cfg.output_dir)?;
    let csv = cfg.output_dir.join("sweep.csv");
    fs::write(&csv, result.to_csv()).map_err(|e| Error::io(&csv, e))?;
    write_json(&cfg.output_dir.join("sweep.json"), &result)?;
    println!("scheme  median_mse  median_mae  ratio   epoch_s");
    for s in &result.summary {
        println!(
            "{:<6}  {:.6}    {:.6}    {:.4}  {:.3}",
            s.scheme, s.median_test_mse, s.median_test_mae, s.trainable_ratio, s.median_epoch_seconds
        );
    }
    Ok(EXIT_OK)
}

/// `data.csv` → `data.manifest.json`.
pub fn manifest_path(csv: &Path) -> PathBuf {
    csv.with_extension("manifest.json")
}

pub fn cmd_gen_data(
    kind: SyntheticKind,
    timesteps: usize,
    channels: usize,
    noise_std: f64,
    seed: u64,
    out: &Path,
) -> Result<u8> {
    if timesteps == 0 || channels == 0 {
        return Err(Error::config("timesteps", "timesteps and channels must be at least 1"));
    }
    let ds = gen_synthetic(kind, timesteps, channels, noise_std, seed)?;
    save_csv(&ds, out)?;
    write_json(&manifest_path(out), &DataManifest::describe(&ds, Some(seed))?)?;
    println!("wrote {} rows x {} channels to {}", timesteps, channels, out.display());
    Ok(EXIT_OK)
}
