//! Command implementations behind the `osdn` binary.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use crate::ablation::AblationGroup;
use crate::config::{CsvTask, RunConfig, TaskSpec};
use crate::data::{synth_domains, write_csv_domain, OpenSetTask, Schema, SynthSpec};
use crate::error::Error;
use crate::evaluation::{compute_metrics, predict_labels, EvalMode, Metrics};
use crate::model::Model;
use crate::training::{
    diagnose, load_checkpoint, save_checkpoint, train, write_history_csv, HyperParams, TrainData,
    TrainHistory, ADAM_BETA1, ADAM_BETA2,
};

#[derive(Debug, Parser)]
#[command(name = "osdn", version, about = "Open-set heterogeneous domain adaptation for intrusion detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic open-set task (CSVs, schema, task file).
    Synth(SynthArgs),
    /// Train from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a task.
    Eval(EvalArgs),
    /// Train and evaluate ablation groups over several seeds.
    Ablate(AblateArgs),
    /// Separability and compactness of the combined dandelion.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 2)]
    pub unknown: usize,
    /// Instances per category.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 20)]
    pub d_source: usize,
    #[arg(long, default_value_t = 16)]
    pub d_target: usize,
    #[arg(long, default_value_t = 2.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Task file or run configuration.
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long, default_value = "acc")]
    pub mode: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated group ids (A, B1, B2, B3, C, D, E1, E2, F, full).
    #[arg(long, default_value = "full,A,B1,B2,B3,C,D,E1,E2,F")]
    pub groups: String,
    /// Comma-separated seeds; defaults to the configured seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Task file or run configuration.
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failure with its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Diagnose(a) => cmd_diagnose(&a),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult {
    let spec = SynthSpec {
        k: a.k,
        unknown_count: a.unknown,
        n_per_category: a.n,
        d_source: a.d_source,
        d_target: a.d_target,
        separation: a.separation,
        seed: a.seed,
    };
    spec.validate().map_err(usage)?;
    let (source, target, shared) = synth_domains(&spec)?;
    fs::create_dir_all(&a.out)?;
    write_csv_domain(&source, &a.out.join("source.csv"))?;
    write_csv_domain(&target, &a.out.join("target.csv"))?;
    write_json(&a.out.join("schema.json"), &Schema::default())?;
    let task = TaskSpec::Csv(CsvTask {
        source_csv: "source.csv".into(),
        target_csv: "target.csv".into(),
        schema: Some("schema.json".into()),
        source_schema: None,
        target_schema: None,
        shared,
        normal: Some("normal".into()),
        source_features: None,
        target_features: None,
        synth: Some(spec),
    });
    write_json(&a.out.join("task.json"), &task)?;
    info!("wrote synthetic task to {}", a.out.display());
    Ok(())
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    RunConfig::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Accepts either a task file or a run configuration.
fn load_task_spec(path: &Path) -> CliResult<TaskSpec> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if value.get("task").is_some() {
        load_config(path)?.task_spec().map_err(usage)
    } else {
        TaskSpec::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))
    }
}

fn prepare_task(spec: &TaskSpec) -> CliResult<OpenSetTask> {
    spec.prepare().map_err(|e| match e {
        Error::InvalidParameter(_) | Error::UnknownVariant { .. } => usage(e),
        other => CliError::Runtime(other),
    })
}

/// Metrics in both modes when the target ground truth is available.
pub fn evaluate_both(model: &Model, task: &OpenSetTask) -> crate::Result<Option<[Metrics; 2]>> {
    let Some(truth) = &task.target_truth else {
        return Ok(None);
    };
    let pred = predict_labels(model, &task.target.features)?;
    let m = |mode| compute_metrics(&pred, truth, mode, task.normal_category, task.k());
    Ok(Some([m(EvalMode::Acc)?, m(EvalMode::Ind)?]))
}

fn metrics_json(metrics: &Option<[Metrics; 2]>) -> serde_json::Value {
    match metrics {
        Some([acc, ind]) => json!({ "acc": acc, "ind": ind }),
        None => json!({ "acc": null, "ind": null }),
    }
}

fn metadata(hp: &HyperParams, history: &TrainHistory) -> serde_json::Value {
    let first = history.records.first();
    json!({
        "crate_version": env!("CARGO_PKG_VERSION"),
        "training_seconds": history.total_seconds(),
        "epoch_seconds": history.epoch_seconds,
        "epochs": hp.epochs,
        "optimizer": { "kind": "adam", "lr": hp.lr, "beta1": ADAM_BETA1, "beta2": ADAM_BETA2 },
        "batch": hp.batch,
        "grl_lambda": hp.grl_lambda,
        "seed": hp.seed,
        "initial_diagnostics": first.map(|r| json!({ "sp": r.sp, "avg_dmax": r.avg_dmax, "unknown_fraction": r.unknown_fraction })),
        "final_diagnostics": history.final_diagnostics,
        "unknown_instances_generated": history.records.iter().map(|r| r.n_generated).sum::<usize>(),
    })
}

pub fn cmd_train(a: &TrainArgs) -> CliResult {
    let cfg = load_config(&a.config)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let hp = cfg.effective_hyperparams();
    let task = prepare_task(&cfg.task_spec().map_err(usage)?)?;
    if task.k() < 2 {
        return Err(usage(format!("training needs K >= 2 shared categories, got {}", task.k())));
    }
    let data = TrainData::from_task(&task);
    let (model, history) = train(&data, &hp)?;
    fs::create_dir_all(&out)?;
    save_checkpoint(&model, &hp, &out.join("checkpoint.json"))?;
    write_history_csv(&history, &out.join("history.csv"))?;
    let metrics = evaluate_both(&model, &task)?;
    if metrics.is_none() {
        warn!("target domain is unlabeled; metrics.json holds nulls");
    }
    write_json(&out.join("metrics.json"), &metrics_json(&metrics))?;
    write_json(&out.join("metadata.json"), &metadata(&hp, &history))?;
    write_json(&out.join("resolved-config.json"), &cfg.resolved()?)?;
    if let Some([acc, ind]) = &metrics {
        info!("ACC accuracy {:.4}, IND accuracy {:.4}", acc.accuracy, ind.accuracy);
    }
    Ok(())
}

fn label_name(task: &OpenSetTask, label: usize) -> &str {
    task.shared_names.get(label).map_or("unknown", String::as_str)
}

fn load_model_for(checkpoint: &Path, task: &OpenSetTask) -> CliResult<Model> {
    let (model, _) = load_checkpoint(checkpoint)?;
    if model.dims.k != task.k() {
        return Err(CliError::Runtime(Error::shape(
            "checkpoint categories",
            task.k(),
            model.dims.k,
        )));
    }
    model.check_input(&task.source.features, crate::data::DomainTag::Source)?;
    model.check_input(&task.target.features, crate::data::DomainTag::Target)?;
    Ok(model)
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult {
    let mode: EvalMode = a.mode.parse().map_err(usage)?;
    let task = prepare_task(&load_task_spec(&a.task)?)?;
    let model = load_model_for(&a.checkpoint, &task)?;
    let start = Instant::now();
    let pred = predict_labels(&model, &task.target.features)?;
    let seconds = start.elapsed().as_secs_f64();
    fs::create_dir_all(&a.out)?;

    let mut w = csv::Writer::from_path(a.out.join("predictions.csv")).map_err(Error::from)?;
    w.write_record(["index", "predicted", "predicted_name", "truth", "truth_name"])
        .map_err(Error::from)?;
    for (i, &p) in pred.iter().enumerate() {
        let (t, tn) = match &task.target_truth {
            Some(tr) => (tr[i].to_string(), label_name(&task, tr[i]).to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([i.to_string(), p.to_string(), label_name(&task, p).into(), t, tn])
            .map_err(Error::from)?;
    }
    w.flush()?;

    match &task.target_truth {
        Some(truth) => {
            let m = compute_metrics(&pred, truth, mode, task.normal_category, task.k())?;
            info!("{mode} accuracy {:.4}", m.accuracy);
            write_json(&a.out.join("metrics.json"), &m)?;
        }
        None => warn!("target domain is unlabeled; only predictions were written"),
    }
    let n = pred.len();
    write_json(
        &a.out.join("timing.json"),
        &json!({
            "instances": n,
            "total_seconds": seconds,
            "milliseconds_per_instance": 1000.0 * seconds / n as f64,
        }),
    )?;
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const ABLATION_COLUMNS: [&str; 11] = [
    "group",
    "mode",
    "runs",
    "accuracy_mean",
    "accuracy_std",
    "precision_mean",
    "precision_std",
    "recall_mean",
    "recall_std",
    "f1_mean",
    "f1_std",
];

pub fn cmd_ablate(a: &AblateArgs) -> CliResult {
    let cfg = load_config(&a.config)?;
    let groups = AblationGroup::parse_list(&a.groups).map_err(usage)?;
    if groups.is_empty() {
        return Err(usage("no ablation groups given"));
    }
    let seeds: Vec<u64> = match &a.seeds {
        Some(s) => s
            .split(',')
            .map(|t| t.trim().parse::<u64>().map_err(|e| usage(format!("seed {t:?}: {e}"))))
            .collect::<CliResult<_>>()?,
        None => cfg.seed_list(),
    };
    if seeds.is_empty() {
        return Err(usage("no seeds given"));
    }
    let task = prepare_task(&cfg.task_spec().map_err(usage)?)?;
    if task.target_truth.is_none() {
        return Err(usage("ablation needs a labeled target domain"));
    }
    let data = TrainData::from_task(&task);
    fs::create_dir_all(&a.out)?;

    let mut w = csv::Writer::from_path(a.out.join("ablation.csv")).map_err(Error::from)?;
    w.write_record(ABLATION_COLUMNS).map_err(Error::from)?;
    for g in &groups {
        let mut per_mode: [Vec<[f64; 4]>; 2] = [Vec::new(), Vec::new()];
        for &seed in &seeds {
            let hp = g.apply(&HyperParams {
                seed,
                ..cfg.hyperparams.clone()
            });
            let (model, history) = train(&data, &hp)?;
            let metrics = evaluate_both(&model, &task)?.expect("labeled target");
            let run_dir = a.out.join("runs").join(format!("{g}-seed{seed}"));
            fs::create_dir_all(&run_dir)?;
            write_json(&run_dir.join("metrics.json"), &metrics_json(&Some(metrics.clone())))?;
            write_history_csv(&history, &run_dir.join("history.csv"))?;
            for (i, m) in metrics.iter().enumerate() {
                per_mode[i].push([m.accuracy, m.precision, m.recall, m.f1]);
            }
            info!("group {g} seed {seed}: ACC {:.4} IND {:.4}", metrics[0].accuracy, metrics[1].accuracy);
        }
        for (mode, rows) in EvalMode::ALL.iter().zip(&per_mode) {
            let mut rec = vec![g.to_string(), mode.to_string(), rows.len().to_string()];
            for c in 0..4 {
                let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
                let (m, s) = mean_std(&col);
                rec.push(m.to_string());
                rec.push(s.to_string());
            }
            w.write_record(&rec).map_err(Error::from)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_diagnose(a: &DiagnoseArgs) -> CliResult {
    let task = prepare_task(&load_task_spec(&a.task)?)?;
    if task.k() < 2 {
        return Err(usage(format!("diagnostics need K >= 2 shared categories, got {}", task.k())));
    }
    let model = load_model_for(&a.checkpoint, &task)?;
    let d = diagnose(&model, &TrainData::from_task(&task))?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_json(
        &a.out,
        &json!({ "sp": d.sp, "avg_dmax": d.avg_dmax, "unknown_fraction": d.unknown_fraction }),
    )?;
    Ok(())
}
