// SPDX-License-Identifier: MIT OR Apache-2.0

//! `ymir`: train, detect, evaluate and generate synthetic data.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ymir_core::detectors::DetectorRegistry;
use ymir_core::pipeline::{self, FittedModel, PipelineConfig, SynthProfile};
use ymir_core::series::{impute_missing, load_labels_csv, load_timeseries_csv, TimeSeriesSet};
use ymir_core::YmirError;

const SEED_VAR: &str = "YMIR_SEED";

#[derive(Parser)]
#[command(name = "ymir", version, about = "Ensemble anomaly detection for multivariate time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit detectors, normalizer and (with labels) the classifier.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Sparse or full `timestamp,label` CSV.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Artifact directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the classifier even when labels are given.
        #[arg(long)]
        unsupervised_only: bool,
    },
    /// Score a series with a trained model.
    Detect {
        #[arg(long)]
        data: PathBuf,
        /// Artifact directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Output directory for `scores.csv` and `result.json`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = DetectMode::Offline)]
        mode: DetectMode,
        /// Rows per appended batch in stream mode.
        #[arg(long, default_value_t = 100)]
        batch: usize,
    },
    /// Best range F1 of a scores CSV against full labels.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded synthetic data set with injected anomalies.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// JSON profile; unspecified fields take defaults.
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        len: Option<usize>,
        #[arg(long)]
        metrics: Option<usize>,
        #[arg(long)]
        period: Option<usize>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DetectMode {
    Offline,
    Stream,
}

enum Failure {
    Usage(String),
    Core(YmirError),
}

impl From<YmirError> for Failure {
    fn from(e: YmirError) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Core(YmirError::Config(_) | YmirError::Param(_) | YmirError::Registry(_)) => 2,
            Failure::Core(e) if e.is_numeric() => 4,
            Failure::Core(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Core(e) => e.fmt(f),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_VAR} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn load_data(path: &Path) -> CliResult<TimeSeriesSet> {
    let ts = load_timeseries_csv(path)?;
    Ok(if ts.has_missing() { impute_missing(&ts)? } else { ts })
}

fn write(path: &Path, body: &str) -> CliResult<()> {
    std::fs::write(path, body).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn train(
    data: Option<PathBuf>,
    labels: Option<PathBuf>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    unsupervised_only: bool,
) -> CliResult<()> {
    let mut cfg = match &config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    cfg.unsupervised_only |= unsupervised_only;
    let data = data.or_else(|| cfg.paths.data.clone()).ok_or_else(|| Failure::Usage("--data is required".into()))?;
    let out = out.or_else(|| cfg.paths.out.clone()).ok_or_else(|| Failure::Usage("--out is required".into()))?;
    let labels = labels.or_else(|| cfg.paths.labels.clone());

    let ts = load_data(&data)?;
    let labels = labels.map(|p| load_labels_csv(p, &ts)).transpose()?;
    let model = pipeline::train(&ts, labels.as_ref(), &cfg, &DetectorRegistry::default())?;
    let manifest = model.save(&out)?;
    eprintln!(
        "trained {} detectors, mode {}, rho {:.4}; artifacts in {}",
        manifest.detectors.len(),
        serde_json::to_value(manifest.mode).map_err(YmirError::from)?.as_str().unwrap_or("?"),
        manifest.rho,
        out.display()
    );
    Ok(())
}

fn detect(data: &Path, model_dir: &Path, out: &Path, mode: DetectMode, batch: usize) -> CliResult<()> {
    if batch == 0 {
        return Err(Failure::Usage("--batch must be at least 1".into()));
    }
    let model = FittedModel::load(model_dir)?;
    let ts = load_data(data)?;
    let registry = DetectorRegistry::default();
    let detection = match mode {
        DetectMode::Offline => pipeline::detect(&model, &ts, &registry)?,
        DetectMode::Stream => pipeline::detect_batched(&model, &ts, &registry, batch)?,
    };
    std::fs::create_dir_all(out).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", out.display())))?;
    write(&out.join("scores.csv"), &detection.to_csv_string())?;
    let result = serde_json::to_string_pretty(&detection.result()).map_err(YmirError::from)?;
    write(&out.join("result.json"), &(result + "\n"))?;
    eprintln!("{} rows scored, {} flagged", detection.rows.len(), detection.result().flagged.len());
    Ok(())
}

fn eval(scores: &Path, labels: &Path, out: Option<&Path>) -> CliResult<()> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())));
    let report = pipeline::evaluate_scores(&read(scores)?, &read(labels)?)?;
    let json = serde_json::to_string_pretty(&report).map_err(YmirError::from)? + "\n";
    match out {
        Some(p) => write(p, &json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn synth(
    out: &Path,
    profile: Option<&Path>,
    seed: Option<u64>,
    len: Option<usize>,
    metrics: Option<usize>,
    period: Option<usize>,
) -> CliResult<()> {
    let mut p: SynthProfile = match profile {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => SynthProfile::default(),
    };
    if let Some(s) = env_seed()?.or(seed) {
        p.seed = s;
    }
    p.len = len.unwrap_or(p.len);
    p.n_metrics = metrics.unwrap_or(p.n_metrics);
    p.period = period.unwrap_or(p.period);
    let data = pipeline::generate_synthetic(&p)?;
    data.write_dir(out, &p)?;
    eprintln!("wrote {} rows and {} events to {}", p.len, data.events.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { data, labels, config, out, unsupervised_only } => train(data, labels, config, out, unsupervised_only),
        Command::Detect { data, model, out, mode, batch } => detect(&data, &model, &out, mode, batch),
        Command::Eval { scores, labels, out } => eval(&scores, &labels, out.as_deref()),
        Command::Synth { out, profile, seed, len, metrics, period } => {
            synth(&out, profile.as_deref(), seed, len, metrics, period)
        }
    }
}

fn main() -> ExitCode {
    // clap exits with code 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ymir: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
