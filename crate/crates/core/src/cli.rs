//! `fedsi` command line: partition, run, evaluate, report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, DatasetKind, ExperimentConfig};
use crate::data::{self, DataError, FederatedDataset, LabeledSet};
use crate::federation::{self, Checkpoint, ClientEvaluation, FedError, ServerState};
use crate::metrics::{self, MetricSummary, MetricsRow, PredictionRecord};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl CliError {
    /// 1 validation, 2 numerical failure, 3 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io { .. } => 3,
            CliError::Data(DataError::Invalid(_) | DataError::InsufficientExamples { .. }) => 1,
            CliError::Data(_) => 3,
            CliError::Fed(e) => match e {
                FedError::Config(_) | FedError::LayoutMismatch(_) | FedError::EmptyClientData { .. } => 1,
                FedError::Data(DataError::Invalid(_) | DataError::InsufficientExamples { .. }) => 1,
                FedError::Data(_) | FedError::Checkpoint(_) => 3,
                _ => 2,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io { path: path.to_path_buf(), message: e.to_string() }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

#[derive(Debug, Parser)]
#[command(name = "fedsi", version, about = "Federated learning with subnetwork Laplace posteriors over a shared representation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split the dataset into per-client shards.
    Partition(CommonArgs),
    /// Run federated training and write checkpoints plus round history.
    Run(CommonArgs),
    /// Personalize and evaluate every client from a checkpoint.
    Evaluate(EvaluateArgs),
    /// Summarize metrics files under a directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `training.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: runs/<config name>/seed<seed>).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to evaluate (default: the final one in the output directory).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory searched recursively for metrics.csv files.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

pub const PARTITION_DIR: &str = "partition";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.json";
pub const HISTORY_CSV: &str = "history.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CLIENT_METRICS_CSV: &str = "metrics_clients.csv";
pub const RELIABILITY_CSV: &str = "reliability.csv";
pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Reads and validates a config; relative dataset paths resolve against the
/// config file's directory.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let text = read_string(path)?;
    let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        cfg.training.seed = s;
    }
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    cfg.validate()?;
    Ok(cfg)
}

pub fn default_out(config_path: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let stem = config_path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    PathBuf::from("runs").join(stem).join(format!("seed{}", cfg.training.seed))
}

/// Loads (or generates) the corpus and applies the subset protocol.
pub fn load_corpus(cfg: &ExperimentConfig) -> Result<(LabeledSet, LabeledSet)> {
    let d = &cfg.dataset;
    let seed = cfg.training.seed;
    Ok(match d.kind {
        DatasetKind::Synthetic => data::synthetic_mixture(d.classes, d.dim, d.per_class, d.separation, seed)?,
        DatasetKind::Mnist | DatasetKind::Fmnist => {
            let dir = d.path.as_deref().expect("validated");
            let (train, test) = data::load_mnist_dir(dir)?;
            data::subset_protocol(&train, &test, d.size, seed)?
        }
    })
}

pub fn build_federated(cfg: &ExperimentConfig) -> Result<FederatedDataset> {
    let (train, test) = load_corpus(cfg)?;
    Ok(data::partition_label_skew(&train, &test, cfg.partition.clients, cfg.partition.labels_per_client, cfg.training.seed)?)
}

pub fn cmd_partition(cfg: &ExperimentConfig, out: &Path) -> Result<FederatedDataset> {
    let fed = build_federated(cfg)?;
    data::write_federated(&out.join(PARTITION_DIR), &fed)?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    Ok(fed)
}

fn load_partition(out: &Path) -> Result<FederatedDataset> {
    let dir = out.join(PARTITION_DIR);
    if !dir.join(data::MANIFEST_FILE).exists() {
        return Err(CliError::Io { path: dir, message: "no partition found; run `fedsi partition` first".into() });
    }
    Ok(data::read_federated(&dir)?)
}

fn checkpoint_path(out: &Path, round: usize) -> PathBuf {
    out.join(format!("checkpoint_round_{round:05}.json"))
}

fn write_checkpoint(path: &Path, state: &ServerState, cfg: &ExperimentConfig) -> Result<()> {
    let ck = Checkpoint::from_state(state, cfg.layout(), &cfg.hash());
    write(path, ck.to_json()?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::from_json(&read_string(path)?)?)
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub outputs: Vec<String>,
    pub history_fingerprint: Option<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// Wall-clock seconds per round (run only).
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub round_seconds: Vec<f64>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    outputs: Vec<String>,
    history: Option<&federation::RoundHistory>,
    started: f64,
) -> Result<()> {
    let m = RunManifest {
        command: command.into(),
        config_hash: cfg.hash(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.training.seed,
        outputs,
        history_fingerprint: history.map(|h| h.fingerprint()),
        started_unix: started,
        finished_unix: now(),
        round_seconds: history.map(|h| h.round_seconds.clone()).unwrap_or_default(),
    };
    let name = format!("{command}_{RUN_MANIFEST}");
    write(&out.join(name), serde_json::to_string_pretty(&m).expect("manifest serializes"))
}

/// Trains and writes checkpoints, `history.csv`, and the final checkpoint.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, verbose: bool) -> Result<(ServerState, federation::RoundHistory)> {
    let started = now();
    let fed = load_partition(out)?;
    let every = cfg.training.checkpoint_every;
    let total = cfg.training.rounds;
    let mut write_err = None;
    let (state, history) = federation::run_rounds(cfg, &fed, &mut |s| {
        if verbose {
            eprintln!("round {}/{total}", s.global.round);
        }
        if every > 0 && s.global.round % every == 0 {
            let path = checkpoint_path(out, s.global.round);
            if let Err(e) = write_checkpoint(&path, s, cfg) {
                write_err = Some(e);
                return Err(FedError::Checkpoint(format!("cannot write {}", path.display())));
            }
            return Ok(Some(path.display().to_string()));
        }
        Ok(None)
    })
    .map_err(|e| write_err.take().unwrap_or(CliError::Fed(e)))?;
    if verbose {
        for f in &history.failures {
            eprintln!("round {}: client {} failed: {}", f.round, f.client_id, f.reason);
        }
    }
    write_checkpoint(&out.join(FINAL_CHECKPOINT), &state, cfg)?;
    let mut csv = Vec::new();
    history.write_csv(&mut csv).map_err(|e| io_err(&out.join(HISTORY_CSV), e))?;
    write(&out.join(HISTORY_CSV), csv)?;
    let mut outputs = vec![FINAL_CHECKPOINT.to_string(), HISTORY_CSV.to_string()];
    outputs.extend(history.checkpoints.iter().map(|(_, p)| p.clone()));
    write_manifest(out, "run", cfg, outputs, Some(&history), started)?;
    Ok((state, history))
}

/// Outcome of an evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub clients: Vec<ClientEvaluation>,
    /// Mean over clients.
    pub mean: MetricSummary,
    /// Sample standard deviation over clients.
    pub std: MetricSummary,
}

fn mean_std(items: &[MetricSummary]) -> (MetricSummary, MetricSummary) {
    let col = |f: fn(&MetricSummary) -> f64| -> (f64, f64) {
        let xs: Vec<f64> = items.iter().map(f).collect();
        mean_and_std(&xs)
    };
    let (a, sa) = col(|m| m.accuracy);
    let (e, se) = col(|m| m.ece);
    let (m, sm) = col(|m| m.mce);
    let (b, sb) = col(|m| m.brier);
    (MetricSummary { accuracy: a, ece: e, mce: m, brier: b }, MetricSummary { accuracy: sa, ece: se, mce: sm, brier: sb })
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn evaluate_state(cfg: &ExperimentConfig, fed: &FederatedDataset, state: &ServerState) -> Result<EvaluationReport> {
    let clients = federation::evaluate(cfg, fed, state)?;
    let ms: Vec<MetricSummary> = clients.iter().map(|c| c.metrics).collect();
    let (mean, std) = mean_std(&ms);
    Ok(EvaluationReport { clients, mean, std })
}

/// Evaluates a checkpoint and writes the metrics and reliability CSVs.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<&Path>) -> Result<EvaluationReport> {
    let started = now();
    let fed = load_partition(out)?;
    let ck_path = checkpoint.map_or_else(|| out.join(FINAL_CHECKPOINT), Path::to_path_buf);
    let ck = read_checkpoint(&ck_path)?;
    if ck.layout != cfg.layout() {
        return Err(FedError::LayoutMismatch(format!(
            "checkpoint layout {:?} does not match the configured {:?}",
            ck.layout,
            cfg.layout()
        ))
        .into());
    }
    let report = evaluate_state(cfg, &fed, &ck.to_state())?;
    let alg = cfg.training.algorithm.name();
    let dataset = cfg.dataset.kind.name();
    let size = cfg.dataset.size_name();
    let seed = cfg.training.seed;

    let row = MetricsRow::new(alg, dataset, size, seed, report.mean);
    let mut buf = Vec::new();
    metrics::write_metrics_csv(&mut buf, &[row]).map_err(|e| io_err(&out.join(METRICS_CSV), e))?;
    write(&out.join(METRICS_CSV), buf)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let header = ["client_id", "test_count", "accuracy", "ece", "mce", "brier"];
    w.write_record(header).map_err(|e| io_err(&out.join(CLIENT_METRICS_CSV), e))?;
    for c in &report.clients {
        let m = c.metrics;
        w.write_record([
            c.id.to_string(),
            c.records.len().to_string(),
            metrics::fmt(m.accuracy),
            metrics::fmt(m.ece),
            metrics::fmt(m.mce),
            metrics::fmt(m.brier),
        ])
        .map_err(|e| io_err(&out.join(CLIENT_METRICS_CSV), e))?;
    }
    write(&out.join(CLIENT_METRICS_CSV), w.into_inner().map_err(|e| io_err(&out.join(CLIENT_METRICS_CSV), e))?)?;

    let pooled: Vec<PredictionRecord> = report.clients.iter().flat_map(|c| c.records.iter().cloned()).collect();
    let rel = metrics::reliability_export(&pooled, cfg.evaluation.ece_bins).map_err(FedError::from)?;
    let mut buf = Vec::new();
    rel.write_csv(&mut buf).map_err(|e| io_err(&out.join(RELIABILITY_CSV), e))?;
    write(&out.join(RELIABILITY_CSV), buf)?;

    let outputs = vec![METRICS_CSV.into(), CLIENT_METRICS_CSV.into(), RELIABILITY_CSV.into()];
    write_manifest(out, "evaluate", cfg, outputs, None, started)?;
    Ok(report)
}

/// Aggregated row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub algorithm: String,
    pub dataset: String,
    pub size: String,
    pub runs: usize,
    /// `(mean, std)` per metric.
    pub accuracy: (f64, f64),
    pub ece: (f64, f64),
    pub mce: (f64, f64),
    pub brier: (f64, f64),
}

fn find_metrics(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir).map_err(|e| io_err(dir, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_metrics(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == METRICS_CSV) {
            found.push(p);
        }
    }
    Ok(())
}

/// Groups every metrics row under `dir` by (algorithm, dataset, size).
pub fn collect_report(dir: &Path) -> Result<Vec<ReportRow>> {
    let mut files = Vec::new();
    if dir.exists() {
        find_metrics(dir, &mut files)?;
    }
    let mut groups: BTreeMap<(String, String, String), Vec<MetricsRow>> = BTreeMap::new();
    for f in files {
        let bytes = fs::read(&f).map_err(|e| io_err(&f, e))?;
        for row in metrics::read_metrics_csv(&bytes[..]).map_err(|e| io_err(&f, e))? {
            groups.entry((row.algorithm.clone(), row.dataset.clone(), row.size.clone())).or_default().push(row);
        }
    }
    Ok(groups
        .into_iter()
        .map(|((algorithm, dataset, size), rows)| {
            let col = |f: fn(&MetricsRow) -> f64| mean_and_std(&rows.iter().map(f).collect::<Vec<_>>());
            ReportRow {
                algorithm,
                dataset,
                size,
                runs: rows.len(),
                accuracy: col(|r| r.accuracy),
                ece: col(|r| r.ece),
                mce: col(|r| r.mce),
                brier: col(|r| r.brier),
            }
        })
        .collect())
}

pub const REPORT_HEADER: [&str; 12] = [
    "algorithm",
    "dataset",
    "size",
    "runs",
    "accuracy_mean",
    "accuracy_std",
    "ece_mean",
    "ece_std",
    "mce_mean",
    "mce_std",
    "brier_mean",
    "brier_std",
];

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER).expect("in-memory write");
    for r in rows {
        let mut rec = vec![r.algorithm.clone(), r.dataset.clone(), r.size.clone(), r.runs.to_string()];
        for (m, s) in [r.accuracy, r.ece, r.mce, r.brier] {
            rec.push(metrics::fmt(m));
            rec.push(metrics::fmt(s));
        }
        w.write_record(rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn report_text(rows: &[ReportRow]) -> String {
    let mut out = format!(
        "{:<12} {:<10} {:<10} {:>4}  {:>16}  {:>16}  {:>16}  {:>16}\n",
        "algorithm", "dataset", "size", "runs", "accuracy (%)", "ece", "mce", "brier"
    );
    for r in rows {
        let pct = |(m, s): (f64, f64)| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s);
        let plain = |(m, s): (f64, f64)| format!("{m:.4} ± {s:.4}");
        out.push_str(&format!(
            "{:<12} {:<10} {:<10} {:>4}  {:>16}  {:>16}  {:>16}  {:>16}\n",
            r.algorithm,
            r.dataset,
            r.size,
            r.runs,
            pct(r.accuracy),
            plain(r.ece),
            plain(r.mce),
            plain(r.brier)
        ));
    }
    out
}

/// Writes `report.csv` and `report.txt` into `dir` and returns the rows.
pub fn cmd_report(dir: &Path) -> Result<Vec<ReportRow>> {
    let rows = collect_report(dir)?;
    write(&dir.join("report.csv"), report_csv(&rows))?;
    write(&dir.join("report.txt"), report_text(&rows))?;
    Ok(rows)
}

fn resolve(common: &CommonArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let cfg = load_config(&common.config, common.seed)?;
    let out = common.out.clone().unwrap_or_else(|| default_out(&common.config, &cfg));
    Ok((cfg, out))
}

/// Dispatches a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Partition(args) => resolve(&args).and_then(|(cfg, out)| {
            let started = now();
            let fed = cmd_partition(&cfg, &out)?;
            write_manifest(&out, "partition", &cfg, vec![PARTITION_DIR.into()], None, started)?;
            for c in &fed.clients {
                println!("client {:>3}: labels {:?}, {} train, {} test", c.id, c.labels, c.train.len(), c.test.len());
            }
            println!("wrote {}", out.join(PARTITION_DIR).display());
            Ok(())
        }),
        Command::Run(args) => resolve(&args).and_then(|(cfg, out)| {
            let (_, history) = cmd_run(&cfg, &out, true)?;
            println!("history fingerprint {}", history.fingerprint());
            println!("wrote {}", out.join(FINAL_CHECKPOINT).display());
            Ok(())
        }),
        Command::Evaluate(args) => resolve(&args.common).and_then(|(cfg, out)| {
            let r = cmd_evaluate(&cfg, &out, args.checkpoint.as_deref())?;
            for c in &r.clients {
                let m = c.metrics;
                println!("client {:>3}: acc {:.4} ece {:.4} mce {:.4} brier {:.4}", c.id, m.accuracy, m.ece, m.mce, m.brier);
            }
            println!(
                "mean over clients: acc {:.4} ± {:.4}, ece {:.4} ± {:.4}, mce {:.4} ± {:.4}, brier {:.4} ± {:.4}",
                r.mean.accuracy, r.std.accuracy, r.mean.ece, r.std.ece, r.mean.mce, r.std.mce, r.mean.brier, r.std.brier
            );
            Ok(())
        }),
        Command::Report(args) => {
            let _ = (&args.config, args.seed);
            cmd_report(&args.out).map(|rows| print!("{}", report_text(&rows)))
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
