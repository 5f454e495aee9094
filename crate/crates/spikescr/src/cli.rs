//! Operator surface behind the `spikescr` binary: dataset generation,
//! training, curriculum distillation, evaluation, energy profiling, and
//! rebinning. Every command is deterministic given its manifest and writes
//! machine-readable outputs only.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::{
    gen_synthetic_dataset, load_dense, load_events, rebin_dense, save_dense, save_events,
    CurriculumSchedule, DataError, DenseDataset, SyntheticSpec,
};
use crate::energy::{
    compute_energy, cost_items_with_options, measure_firing_rates, EnergyConstants, InputKind,
};
use crate::layers::{load_model, save_model, Model, ModelConfig};
use crate::train::{
    evaluate, kdcl_run, metrics_to_csv, train_direct, DistillConfig, OptimConfig, TrainError,
    TrainOptions,
};
pub use crate::train::direct::AugmentKind;

/// Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Param(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Data(d) => CliError::from(d),
            TrainError::Diverged { .. } | TrainError::Compute(_) => {
                CliError::Numeric(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::layers::CheckpointError> for CliError {
    fn from(e: crate::layers::CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "spikescr",
    version,
    about = "Spike-driven sequence classification with curriculum distillation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic event dataset (JSONL plus metadata sidecar).
    GenData(GenDataArgs),
    /// Train directly at a single temporal resolution.
    Train(TrainArgs),
    /// Run curriculum knowledge distillation over a schedule.
    Kdcl(KdclArgs),
    /// Evaluate a checkpoint: accuracy and confusion matrix.
    Eval(EvalArgs),
    /// Profile synaptic-operation energy of a checkpoint.
    Profile(ProfileArgs),
    /// Rebin a dataset to a different number of time steps.
    Rebin(RebinArgs),
}

/// Seed resolution: flag, then SPIKESCR_SEED, then 0.
fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("SPIKESCR_SEED")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(0)
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Snapshot of one run: inputs, merged config, and produced artifacts.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub build: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<String>,
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config: serde_json::Value,
    seed: u64,
    started: u64,
    artifacts: Vec<String>,
) -> Result<(), CliError> {
    let manifest = RunManifest {
        command: command.to_string(),
        config,
        seed,
        build: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        finished_unix: unix_now(),
        artifacts,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(())
}

/// Training configuration file: canonical JSON, flags override file values.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub distill: DistillConfig,
    pub augment: Option<AugmentConfig>,
    pub augment_kind: Option<AugmentKind>,
}

fn load_run_config(path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))
        }
        None => Ok(RunConfig::default()),
    }
}

/// Load a dense dataset from either an event JSONL (binned at `t_steps`) or
/// a dense container (whose resolution must match).
fn load_dataset(path: &Path, t_steps: Option<usize>) -> Result<DenseDataset, CliError> {
    let name = path.to_string_lossy();
    if name.ends_with(".jsonl") {
        let t = t_steps.ok_or_else(|| {
            CliError::Usage("--t-steps is required for event (.jsonl) datasets".into())
        })?;
        Ok(load_events(path)?.to_dense(t)?)
    } else {
        let dense = load_dense(path)?;
        if let Some(t) = t_steps {
            if t != dense.t_steps {
                return Err(CliError::Usage(format!(
                    "dense file holds T={}, but --t-steps {t} was requested; use `rebin`",
                    dense.t_steps
                )));
            }
        }
        Ok(dense)
    }
}

// ── gen-data ────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: u32,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 140)]
    pub neurons: u32,
    #[arg(long, default_value_t = 1.0)]
    pub duration: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let seed = resolve_seed(args.seed);
    let spec = SyntheticSpec {
        n_classes: args.classes,
        n_samples: args.samples,
        n_neurons: args.neurons,
        duration: args.duration,
        seed,
    };
    let dataset = gen_synthetic_dataset(&spec)?;
    save_events(&args.out, &dataset, Some(seed))?;
    println!(
        "wrote {} samples ({} classes, {} neurons) to {}",
        args.samples,
        args.classes,
        args.neurons,
        args.out.display()
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Event JSONL or dense SDNS dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset for per-epoch validation accuracy.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    /// Canonical-JSON config file (flags override file values).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub t_steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from an existing checkpoint, keeping epoch numbering.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn merged_train_config(
    args: &TrainArgs,
    file: RunConfig,
    input_channels: usize,
    n_classes: usize,
) -> RunConfig {
    let mut cfg = file;
    cfg.model.input_channels = input_channels;
    cfg.model.n_classes = n_classes;
    if let Some(e) = args.epochs {
        cfg.optim.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.optim.batch_size = b;
    }
    if let Some(lr) = args.learning_rate {
        cfg.optim.learning_rate = lr;
    }
    cfg
}

fn last_epoch_in_metrics(path: &Path) -> Option<u32> {
    let text = std::fs::read_to_string(path).ok()?;
    text.lines()
        .skip(1)
        .filter_map(|l| l.split(',').next()?.parse::<u32>().ok())
        .max()
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let started = unix_now();
    let seed = resolve_seed(args.seed);
    let train_data = load_dataset(&args.data, args.t_steps)?;
    let val_data = args
        .val_data
        .as_ref()
        .map(|p| load_dataset(p, Some(train_data.t_steps)))
        .transpose()?;
    let cfg = merged_train_config(
        args,
        load_run_config(args.config.as_ref())?,
        train_data.n_neurons,
        train_data.n_classes as usize,
    );

    std::fs::create_dir_all(&args.out_dir)?;
    let metrics_path = args.out_dir.join("metrics.csv");
    let (mut model, start_epoch, mut prior_csv) = match &args.resume {
        Some(ckpt) => {
            let model = load_model(ckpt)?;
            let last = last_epoch_in_metrics(&metrics_path);
            let prior = std::fs::read_to_string(&metrics_path).unwrap_or_default();
            (model, last.map_or(0, |e| e + 1), prior)
        }
        None => {
            let model = Model::new(cfg.model.clone(), seed)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            (model, 0, String::new())
        }
    };

    let opts = TrainOptions {
        optim: cfg.optim,
        augment: cfg.augment.map(|a| (a, cfg.augment_kind.unwrap_or(AugmentKind::EventDrop))),
        seed,
        stage: 0,
        start_epoch,
    };
    let rows = train_direct(&mut model, &train_data, val_data.as_ref(), &opts)?;

    let ckpt_path = args.out_dir.join("checkpoint.sscr");
    save_model(&mut model, &ckpt_path)?;
    let csv = metrics_to_csv(&rows);
    if prior_csv.is_empty() {
        prior_csv = csv;
    } else {
        // keep the original header, append the new rows
        prior_csv.push_str(csv.split_once('\n').map(|x| x.1).unwrap_or(""));
    }
    std::fs::write(&metrics_path, prior_csv)?;
    write_manifest(
        &args.out_dir,
        "train",
        serde_json::to_value(&cfg).expect("config serializes"),
        seed,
        started,
        vec!["checkpoint.sscr".into(), "metrics.csv".into()],
    )?;
    if let Some(last) = rows.last() {
        println!(
            "trained {} epochs at T={}: train_acc={:.4} val_acc={:.4}",
            rows.len(),
            train_data.t_steps,
            last.train_acc,
            last.val_acc
        );
    }
    Ok(())
}

// ── kdcl ────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct KdclArgs {
    /// Event JSONL dataset (rebinned per stage).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Strictly decreasing time steps, e.g. "40,20,10".
    #[arg(long)]
    pub schedule: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn cmd_kdcl(args: &KdclArgs) -> Result<(), CliError> {
    let started = unix_now();
    let seed = resolve_seed(args.seed);
    let schedule = CurriculumSchedule::parse(&args.schedule)?;
    let events = load_events(&args.data)?;
    let val_events = args.val_data.as_ref().map(|p| load_events(p)).transpose()?;
    let mut cfg = load_run_config(args.config.as_ref())?;
    cfg.model.input_channels = events.n_neurons as usize;
    cfg.model.n_classes = events.n_classes as usize;

    let outcome = kdcl_run(
        &schedule,
        &events,
        val_events.as_ref(),
        &cfg.model,
        &cfg.distill,
        &cfg.optim,
        seed,
    )?;

    std::fs::create_dir_all(&args.out_dir)?;
    let mut artifacts = Vec::new();
    for (report, model) in outcome.stages.iter().zip(outcome.stage_models) {
        let name = format!("stage{}_T{}.sscr", report.stage, report.t_steps);
        let mut model = model;
        save_model(&mut model, &args.out_dir.join(&name))?;
        artifacts.push(name);
    }
    std::fs::write(
        args.out_dir.join("stage_reports.json"),
        serde_json::to_string_pretty(&outcome.stages).expect("reports serialize"),
    )?;
    std::fs::write(
        args.out_dir.join("metrics.csv"),
        metrics_to_csv(&outcome.metrics),
    )?;
    artifacts.push("stage_reports.json".into());
    artifacts.push("metrics.csv".into());
    write_manifest(
        &args.out_dir,
        "kdcl",
        serde_json::to_value(&cfg).expect("config serializes"),
        seed,
        started,
        artifacts,
    )?;
    for r in &outcome.stages {
        println!(
            "stage {} (T={}): train_acc={:.4} val_acc={:.4} teacher_val_acc={}",
            r.stage,
            r.t_steps,
            r.final_train_acc,
            r.final_val_acc,
            r.teacher_val_acc
                .map(|a| format!("{a:.4}"))
                .unwrap_or_else(|| "-".into()),
        );
    }
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub t_steps: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Confusion-matrix CSV output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let mut model = load_model(&args.checkpoint)?;
    let data = load_dataset(&args.data, args.t_steps)?;
    let report = evaluate(&mut model, &data, args.batch_size)?;
    println!("accuracy {:.6} over {} samples", report.accuracy, report.n_samples);
    let mut csv = String::from("true_class");
    for p in 0..report.confusion.len() {
        csv.push_str(&format!(",pred_{p}"));
    }
    csv.push('\n');
    for (c, row) in report.confusion.iter().enumerate() {
        csv.push_str(&c.to_string());
        for v in row {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    match &args.out {
        Some(p) => std::fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

// ── profile ─────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct ProfileArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub t_steps: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// spike: all-AC accounting; real: first layer billed at MAC.
    #[arg(long, default_value = "spike")]
    pub input_kind: String,
    #[arg(long, default_value_t = 4.6)]
    pub e_mac_pj: f64,
    #[arg(long, default_value_t = 0.9)]
    pub e_ac_pj: f64,
    /// Bill rotary rotations and attention scaling as MAC work.
    #[arg(long, default_value_t = false)]
    pub include_float_ops: bool,
    #[arg(long)]
    pub out_json: Option<PathBuf>,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

pub fn cmd_profile(args: &ProfileArgs) -> Result<(), CliError> {
    let mut model = load_model(&args.checkpoint)?;
    let data = load_dataset(&args.data, args.t_steps)?;
    let input_kind = match args.input_kind.as_str() {
        "spike" => InputKind::Spike,
        "real" => InputKind::Real,
        other => {
            return Err(CliError::Usage(format!(
                "--input-kind must be `spike` or `real`, got `{other}`"
            )))
        }
    };
    let rates = measure_firing_rates(&mut model, &data, args.batch_size)?;
    // Per-sample accounting: batch of 1 at the dataset resolution.
    let items = cost_items_with_options(&model.cfg, 1, data.t_steps, args.include_float_ops);
    let constants = EnergyConstants { e_mac_pj: args.e_mac_pj, e_ac_pj: args.e_ac_pj };
    let report = compute_energy(&items, &rates, input_kind, constants)
        .map_err(|e| CliError::Data(e.to_string()))?;
    println!(
        "E_total = {:.6e} mJ per sample at T={} ({} layers, {} FLOPs)",
        report.e_total_mj,
        data.t_steps,
        report.layers.len(),
        report.total_flops
    );
    if let Some(p) = &args.out_json {
        std::fs::write(p, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    if let Some(p) = &args.out_csv {
        std::fs::write(p, report.to_csv())?;
    }
    if args.out_json.is_none() && args.out_csv.is_none() {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    }
    Ok(())
}

// ── rebin ───────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct RebinArgs {
    /// Source dataset: event JSONL (any target T) or dense SDNS (divisor T).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub to_t: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_rebin(args: &RebinArgs) -> Result<(), CliError> {
    let name = args.input.to_string_lossy();
    let dense = if name.ends_with(".jsonl") {
        load_events(&args.input)?.to_dense(args.to_t)?
    } else {
        let src = load_dense(&args.input)?;
        let samples = src
            .samples
            .iter()
            .map(|s| rebin_dense(s, args.to_t))
            .collect::<Result<Vec<_>, _>>()?;
        DenseDataset {
            samples,
            t_steps: args.to_t,
            n_neurons: src.n_neurons,
            n_classes: src.n_classes,
        }
    };
    save_dense(&args.out, &dense)?;
    println!(
        "wrote {} samples at T={} to {}",
        dense.samples.len(),
        dense.t_steps,
        args.out.display()
    );
    Ok(())
}

/// Dispatch a parsed command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Kdcl(a) => cmd_kdcl(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Rebin(a) => cmd_rebin(a),
    }
}
