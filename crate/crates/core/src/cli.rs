//! `outcome-align` command line.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 numerical abort,
//! 4 undefined metric, 5 gradient-check failure. Every file a command writes
//! gets a sibling `<file>.manifest.json` recording the command, resolved
//! configuration, input digests, tool version and wall-clock duration.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, Component, GradcheckConfig, GradcheckDims, GRADCHECK_TOLERANCE};
use crate::metrics::{GeometryReport, MetricsReport, DEFAULT_ECE_BINS};
use crate::model::ModelDims;
use crate::objective::{ObjectiveConfig, SingleClassPolicy, DEFAULT_EPSILON, DEFAULT_LAMBDA};
use crate::synthcohort::{generate_cohort, read_cohort, split_cohort, Cohort, CohortSpec};
use crate::trainkit::{
    evaluate_with_bins, load_checkpoint_expecting, save_checkpoint, sweep_sample_efficiency,
    sweep_to_csv, train, write_atomic, TrainConfig, DEFAULT_LEARNING_RATE,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_METRIC: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

pub const TOOL_VERSION: &str = concat!("outcome-align ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(name = "outcome-align", version, about = "Outcome-aligned representation learning toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic longitudinal cohort.
    Generate(GenerateArgs),
    /// Train encoder and risk head on a cohort.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a cohort.
    Eval(EvalArgs),
    /// Sample-efficiency sweep over training fractions and seeds.
    Sweep(SweepArgs),
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

fn open_unit(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie in (0, 1), got {v}"))
    }
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be positive, got {v}"))
    }
}

fn non_negative(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be >= 0, got {v}"))
    }
}

fn unit_fraction(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie in (0, 1], got {v}"))
    }
}

fn split_ratios(s: &str) -> std::result::Result<(f64, f64, f64), String> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(format!("expected three comma-separated ratios, got {}", parts.len())),
    }
}

fn policy(s: &str) -> std::result::Result<SingleClassPolicy, String> {
    match s {
        "skip" => Ok(SingleClassPolicy::Skip),
        "use-ema" | "use_ema" => Ok(SingleClassPolicy::UseEma),
        other => Err(format!("expected skip or use-ema, got {other}")),
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 48)]
    pub features: usize,
    #[arg(long, default_value_t = 4)]
    pub static_dim: usize,
    #[arg(long, default_value_t = 0.3, value_parser = open_unit)]
    pub prevalence: f64,
    #[arg(long, default_value_t = 4)]
    pub signal_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub nuisance_dim: usize,
    #[arg(long, default_value_t = 2.0, value_parser = positive)]
    pub effect_size: f64,
    #[arg(long, default_value_t = 8)]
    pub events_min: usize,
    #[arg(long, default_value_t = 32)]
    pub events_max: usize,
    #[arg(long, default_value_t = 365.0, value_parser = positive)]
    pub horizon_days: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Also write `<out>.train/.val/.test` parts with these ratios.
    #[arg(long, value_parser = split_ratios)]
    pub split: Option<(f64, f64, f64)>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

impl GenerateArgs {
    fn spec(&self) -> CohortSpec {
        CohortSpec {
            n_patients: self.n,
            features: self.features,
            static_dim: self.static_dim,
            prevalence: self.prevalence,
            signal_dim: self.signal_dim,
            nuisance_dim: self.nuisance_dim,
            effect_size: self.effect_size,
            events_min: self.events_min,
            events_max: self.events_max,
            horizon_days: self.horizon_days,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 16)]
    pub event_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub time_frequencies: usize,
    #[arg(long, default_value_t = 16)]
    pub embedding_dim: usize,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "32")]
    pub hidden: Vec<usize>,
}

impl ModelArgs {
    fn dims(&self) -> ModelDims {
        ModelDims {
            event_dim: self.event_dim,
            time_frequencies: self.time_frequencies,
            embedding_dim: self.embedding_dim,
            hidden: self.hidden.clone(),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainingArgs {
    #[arg(long, default_value_t = DEFAULT_LAMBDA, value_parser = non_negative)]
    pub lambda: f64,
    #[arg(long, default_value_t = DEFAULT_EPSILON, value_parser = positive)]
    pub epsilon: f64,
    #[arg(long)]
    pub ema_decay: Option<f64>,
    #[arg(long, default_value = "skip", value_parser = policy)]
    pub single_class_policy: SingleClassPolicy,
    /// Train on cross-entropy alone without evaluating the regularizer.
    #[arg(long)]
    pub no_regularizer: bool,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE, value_parser = positive)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub eval_every: usize,
    #[arg(long)]
    pub no_shuffle: bool,
    #[command(flatten)]
    pub model: ModelArgs,
}

impl TrainingArgs {
    fn config(&self, checkpoint: Option<PathBuf>) -> Result<TrainConfig> {
        let config = TrainConfig {
            objective: ObjectiveConfig {
                lambda: self.lambda,
                epsilon: self.epsilon,
                ema_decay: self.ema_decay,
                single_class_policy: self.single_class_policy,
            },
            regularizer_enabled: !self.no_regularizer,
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            seed: self.seed,
            eval_every: self.eval_every,
            checkpoint_path: checkpoint,
            shuffle: !self.no_shuffle,
        };
        config.validate()?;
        self.model.dims().validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub history: PathBuf,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ECE_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = DEFAULT_EPSILON, value_parser = positive)]
    pub epsilon: f64,
    /// Machine-readable report (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long, value_delimiter = ',', required = true, value_parser = unit_fraction)]
    pub fractions: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// features,static,event_dim,time_frequencies,embedding_dim,hidden[,batch]
    #[arg(long, value_delimiter = ',', default_value = "6,2,4,2,4,5,8")]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 0.5, value_parser = non_negative)]
    pub lambda: f64,
    /// Corrupt one component's analytic gradient (self-test of the harness).
    #[arg(long, hide = true)]
    pub perturb: Option<String>,
}

#[derive(Serialize)]
struct InputDigest {
    path: PathBuf,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    command: &'a str,
    config: &'a C,
    inputs: &'a [InputDigest],
    artifact: PathBuf,
    tool_version: &'a str,
    duration_seconds: f64,
}

fn digest(path: &Path) -> Result<InputDigest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(InputDigest {
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut p = artifact.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

struct Run<'a, C: Serialize> {
    command: &'a str,
    config: &'a C,
    inputs: Vec<InputDigest>,
    started: Instant,
}

impl<C: Serialize> Run<'_, C> {
    fn write_manifest(&self, artifact: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            inputs: &self.inputs,
            artifact: artifact.to_path_buf(),
            tool_version: TOOL_VERSION,
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(&manifest_path(artifact), text.as_bytes())
    }

    fn write_artifact(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes)?;
        self.write_manifest(path)
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFiniteLoss { .. } => EXIT_NUMERICAL,
        Error::MetricUndefined(_) => EXIT_METRIC,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(stdout, "{text}");
            } else {
                let _ = write!(stderr, "{text}");
            }
            return if code == 0 { EXIT_OK } else { EXIT_USAGE };
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a, stdout),
        Command::Train(a) => cmd_train(a, stdout),
        Command::Eval(a) => cmd_eval(a, stdout),
        Command::Sweep(a) => cmd_sweep(a, stdout),
        Command::Gradcheck(a) => cmd_gradcheck(a, stdout),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            let _ = writeln!(stderr, "error: {err}");
            exit_code(&err)
        }
    }
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn with_suffix(path: &Path, part: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{part}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{part}"),
    };
    path.with_file_name(name)
}

fn cohort_bytes(cohort: &Cohort) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    crate::synthcohort::write_cohort_to(cohort, &mut buf)?;
    Ok(buf)
}

pub fn cmd_generate(args: &GenerateArgs, stdout: &mut dyn Write) -> Result<i32> {
    let spec = args.spec();
    spec.validate()?;
    let run = Run {
        command: "generate",
        config: args,
        inputs: Vec::new(),
        started: Instant::now(),
    };
    let cohort = generate_cohort(&spec)?;
    run.write_artifact(&args.out, &cohort_bytes(&cohort)?)?;
    writeln!(
        stdout,
        "n={}\nprevalence={}\nF={}\nS={}",
        cohort.len(),
        cohort.prevalence(),
        cohort.schema.features,
        cohort.schema.static_dim
    )
    .map_err(out_err)?;
    if let Some(ratios) = args.split {
        let (a, b, c) = split_cohort(&cohort, ratios, args.split_seed)?;
        for (part, name) in [(&a, "train"), (&b, "val"), (&c, "test")] {
            let path = with_suffix(&args.out, name);
            run.write_artifact(&path, &cohort_bytes(part)?)?;
            writeln!(
                stdout,
                "{name}: n={} prevalence={} -> {}",
                part.len(),
                part.prevalence(),
                path.display()
            )
            .map_err(out_err)?;
        }
    }
    Ok(EXIT_OK)
}

pub fn cmd_train(args: &TrainArgs, stdout: &mut dyn Write) -> Result<i32> {
    let config = args.training.config(None)?;
    let dims = args.training.model.dims();
    let run = Run {
        command: "train",
        config: args,
        inputs: vec![digest(&args.cohort)?, digest(&args.val)?],
        started: Instant::now(),
    };
    let train_cohort = read_cohort(&args.cohort)?;
    let val_cohort = read_cohort(&args.val)?;
    let (params, history) = train(&config, &train_cohort, &val_cohort, train_cohort.schema, &dims)?;

    save_checkpoint(&params, &args.checkpoint)?;
    run.write_manifest(&args.checkpoint)?;
    run.write_artifact(&args.history, history.to_jsonl()?.as_bytes())?;

    for r in &history.records {
        let val = r
            .val_metrics
            .as_ref()
            .map(|m| format!(" val_auroc={:.4}", m.auroc))
            .unwrap_or_default();
        writeln!(
            stdout,
            "epoch={} sup={:.6} total={:.6} rdisc={}{}",
            r.epoch,
            r.mean_sup,
            r.mean_total,
            r.mean_rdisc.map_or("NA".into(), |v| format!("{v:.6}")),
            val
        )
        .map_err(out_err)?;
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct EvalReport<'a> {
    metrics: &'a MetricsReport,
    geometry: &'a GeometryReport,
}

pub fn cmd_eval(args: &EvalArgs, stdout: &mut dyn Write) -> Result<i32> {
    if args.bins == 0 {
        return Err(Error::InvalidConfig("--bins must be at least 1".into()));
    }
    let run = Run {
        command: "eval",
        config: args,
        inputs: vec![digest(&args.cohort)?, digest(&args.checkpoint)?],
        started: Instant::now(),
    };
    let cohort = read_cohort(&args.cohort)?;
    let params = load_checkpoint_expecting(&args.checkpoint, cohort.schema, None)?;
    let (metrics, geometry) = evaluate_with_bins(&params, &cohort, args.epsilon, args.bins)?;
    write!(stdout, "{}{}", metrics.to_kv_text(), geometry.to_kv_text()).map_err(out_err)?;
    let mut text = serde_json::to_string_pretty(&EvalReport {
        metrics: &metrics,
        geometry: &geometry,
    })?;
    text.push('\n');
    run.write_artifact(&args.out, text.as_bytes())?;
    Ok(EXIT_OK)
}

pub fn cmd_sweep(args: &SweepArgs, stdout: &mut dyn Write) -> Result<i32> {
    let config = args.training.config(None)?;
    let dims = args.training.model.dims();
    let run = Run {
        command: "sweep",
        config: args,
        inputs: vec![digest(&args.cohort)?, digest(&args.val)?],
        started: Instant::now(),
    };
    let train_cohort = read_cohort(&args.cohort)?;
    let val_cohort = read_cohort(&args.val)?;
    let rows = sweep_sample_efficiency(&config, &train_cohort, &val_cohort, &dims, &args.fractions, &args.seeds)?;
    let csv = sweep_to_csv(&rows);
    write!(stdout, "{csv}").map_err(out_err)?;
    run.write_artifact(&args.out, csv.as_bytes())?;
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(args: &GradcheckArgs, stdout: &mut dyn Write) -> Result<i32> {
    let d = &args.dims;
    if !(6..=7).contains(&d.len()) {
        return Err(Error::InvalidConfig(format!(
            "--dims needs 6 or 7 comma-separated sizes, got {}",
            d.len()
        )));
    }
    let perturb = match &args.perturb {
        Some(name) => Some(Component::parse(name).ok_or_else(|| {
            Error::InvalidConfig(format!("unknown component {name}"))
        })?),
        None => None,
    };
    let config = GradcheckConfig {
        seed: args.seed,
        trials: args.trials,
        dims: GradcheckDims {
            features: d[0],
            static_dim: d[1],
            event_dim: d[2],
            time_frequencies: d[3],
            embedding_dim: d[4],
            hidden: d[5],
            batch: d.get(6).copied().unwrap_or(8),
        },
        lambda: args.lambda,
        perturb,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&config)?;
    for c in &report.components {
        writeln!(
            stdout,
            "{:<9} max_rel_discrepancy={:.3e} {}",
            c.component.name(),
            c.max_discrepancy,
            if c.passed { "PASS" } else { "FAIL" }
        )
        .map_err(out_err)?;
    }
    if report.passed() {
        writeln!(stdout, "all components within {GRADCHECK_TOLERANCE:e} over {} trials", report.trials)
            .map_err(out_err)?;
        Ok(EXIT_OK)
    } else {
        let failing: Vec<_> = report.failing().iter().map(|c| c.name()).collect();
        writeln!(stdout, "gradient check failed: {}", failing.join(", ")).map_err(out_err)?;
        Ok(EXIT_GRADCHECK)
    }
}
