//! Experiment stages behind the `fedtta` binary.
//!
//! Each stage reads an [`ExperimentConfig`], works inside its output
//! directory under a lockfile, and writes deterministic artifacts so a rerun
//! with the same inputs reproduces identical bytes.

mod config;

pub use config::{apply_override, DataSection, DataSource, ExperimentConfig, StatsSection, TtaSection};

use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::dataio::{dedup, ingest_dir, partition_clients, stratified_split, DataError, Manifest};
use crate::federation::{run_federation, FederationError, RoundRecord, TransportKind};
use crate::imaging::PipelineKind;
use crate::model::{load_checkpoint, save_checkpoint, ModelError};
use crate::stats::{compare_conditions, markdown_table, read_metric_column, PairedSamples, StatsError, TestResult};
use crate::synthdata::{generate_corpus, SynthSpec};
use crate::tta::{evaluate_tta_runs, RunTable, TtaError, TtaPolicy};

/// Failure class, mapped one-to-one onto the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    /// Bad arguments, config or a locked output directory.
    Usage,
    Data,
    Model,
    Protocol,
    Stats,
}

impl ExitKind {
    pub fn code(self) -> u8 {
        match self {
            ExitKind::Usage => 1,
            ExitKind::Data => 2,
            ExitKind::Model => 3,
            ExitKind::Protocol => 4,
            ExitKind::Stats => 5,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub stage: String,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ExitKind, stage: &str, message: impl Into<String>) -> Self {
        Self { kind, stage: stage.to_string(), message: message.into() }
    }

    fn data(stage: &str, e: DataError) -> Self {
        Self::new(ExitKind::Data, stage, e.to_string())
    }

    fn model(stage: &str, e: impl fmt::Display) -> Self {
        Self::new(ExitKind::Model, stage, e.to_string())
    }

    fn stats(stage: &str, e: StatsError) -> Self {
        Self::new(ExitKind::Stats, stage, e.to_string())
    }

    fn federation(e: FederationError) -> Self {
        let kind = match &e {
            FederationError::Model(_) => ExitKind::Model,
            FederationError::Config(_) => ExitKind::Usage,
            _ => ExitKind::Protocol,
        };
        Self::new(kind, "train", e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}` failed: {}", self.stage, self.message)
    }
}

impl std::error::Error for CliError {}

pub type Result<T> = std::result::Result<T, CliError>;

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let io = |e: std::io::Error| CliError::new(ExitKind::Usage, "lock", format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(io)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::new(
                ExitKind::Usage,
                "lock",
                format!("{} is in use by another run (delete {} if it is stale)", dir.display(), path.display()),
            )),
            Err(e) => Err(io(e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn write_bytes(stage: &str, kind: ExitKind, path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::new(kind, stage, format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::new(kind, stage, format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(stage: &str, kind: ExitKind, path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_bytes(stage, kind, path, text.as_bytes())
}

fn client_manifest_path(cfg: &ExperimentConfig, id: u32) -> PathBuf {
    cfg.manifest_dir().join(format!("client_{id}.json"))
}

// ---------------------------------------------------------------------------
// gen-data

/// Write a synthetic corpus to `out_dir`.
pub fn cmd_gen_data(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    let _lock = OutputLock::acquire(out_dir)?;
    let m = generate_corpus(spec, out_dir).map_err(|e| CliError::data("generate", e))?;
    info!("generated {} images in {}", m.len(), out_dir.display());
    Ok(m)
}

// ---------------------------------------------------------------------------
// prepare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub class_names: Vec<String>,
    pub files_found: usize,
    pub duplicates_removed: usize,
    pub removed_ids: Vec<String>,
    pub dataset_counts: Vec<usize>,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub client_counts: BTreeMap<u32, Vec<usize>>,
}

/// Generate or ingest, deduplicate, split and partition. Writes
/// `manifests/{dataset,train,test,client_<id>}.json` and
/// `prepare_report.json`.
pub fn cmd_prepare(cfg: &ExperimentConfig) -> Result<PrepareReport> {
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    let all = match &cfg.data.source {
        DataSource::Synthetic(spec) => {
            let dir = cfg.output_dir.join("data");
            generate_corpus(spec, &dir).map_err(|e| CliError::data("generate", e))?
        }
        DataSource::Dir(dir) => ingest_dir(dir).map_err(|e| CliError::data("ingest", e))?,
    };
    if all.class_names.len() != cfg.model.num_classes {
        return Err(CliError::new(
            ExitKind::Data,
            "ingest",
            format!("found {} classes {:?} but model.num_classes is {}", all.class_names.len(), all.class_names, cfg.model.num_classes),
        ));
    }
    let (kept, removed) = dedup(&all);
    info!("dedup: {} files, {} duplicates removed", all.len(), removed.len());
    let (train, test) = stratified_split(&kept, cfg.data.train_fraction, cfg.data.seed).map_err(|e| CliError::data("split", e))?;
    let ids: Vec<u32> = cfg.federation.client_pipelines.keys().copied().collect();
    let parts = partition_clients(&train, ids.len(), cfg.data.seed).map_err(|e| CliError::data("partition", e))?;

    let save = |m: &Manifest, path: PathBuf| m.save(&path).map_err(|e| CliError::data("write", e));
    std::fs::create_dir_all(cfg.manifest_dir())
        .map_err(|e| CliError::new(ExitKind::Data, "write", format!("{}: {e}", cfg.manifest_dir().display())))?;
    save(&kept, cfg.manifest_dir().join("dataset.json"))?;
    save(&train, cfg.manifest_dir().join("train.json"))?;
    save(&test, cfg.manifest_dir().join("test.json"))?;
    let mut client_counts = BTreeMap::new();
    for (id, part) in ids.iter().zip(&parts) {
        save(part, client_manifest_path(cfg, *id))?;
        client_counts.insert(*id, part.class_counts());
    }
    let report = PrepareReport {
        class_names: kept.class_names.clone(),
        files_found: all.len(),
        duplicates_removed: removed.len(),
        removed_ids: removed.iter().map(|e| e.sample_id.clone()).collect(),
        dataset_counts: kept.class_counts(),
        train_counts: train.class_counts(),
        test_counts: test.class_counts(),
        client_counts,
    };
    write_json("write", ExitKind::Data, &cfg.output_dir.join("prepare_report.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// train

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).map_err(|e| CliError::data("load manifests", e))
}

/// Long-format round log: one row per client evaluation, one per global
/// evaluation and one `global_mean` row per round.
pub fn write_round_csv<W: Write>(records: &[RoundRecord], writer: W) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["round", "role", "client_id", "pipeline", "num_samples", "accuracy", "precision", "recall", "f1"])?;
    let fmt = |x: f64| format!("{x:.17}");
    let pipeline = |k: PipelineKind| match k {
        PipelineKind::Original => "original",
        PipelineKind::Preprocessed => "preprocessed",
    };
    for r in records {
        for c in &r.clients {
            let mut row = vec![r.round.to_string(), "client".into(), c.client_id.to_string(), pipeline(c.pipeline).into(), c.num_samples.to_string()];
            row.extend(c.metrics.csv_fields().map(fmt));
            w.write_record(row)?;
        }
        for g in &r.global {
            let mut row = vec![r.round.to_string(), "global".into(), String::new(), pipeline(g.pipeline).into(), String::new()];
            row.extend(g.metrics.csv_fields().map(fmt));
            w.write_record(row)?;
        }
        w.write_record([r.round.to_string(), "global_mean".into(), String::new(), String::new(), String::new(), fmt(r.global_accuracy), String::new(), String::new(), String::new()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub rounds: Vec<RoundRecord>,
}

/// Federated training on the prepared client manifests. Writes `model.ckpt`,
/// `rounds.csv` and `rounds.json`.
pub fn cmd_train(cfg: &ExperimentConfig, transport: TransportKind) -> Result<TrainSummary> {
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    let mut clients = BTreeMap::new();
    for &id in cfg.federation.client_pipelines.keys() {
        clients.insert(id, load_manifest(&client_manifest_path(cfg, id))?);
    }
    let test = load_manifest(&cfg.manifest_dir().join("test.json"))?;
    let outcome = run_federation(&cfg.federation, &cfg.model, &clients, &test, transport).map_err(CliError::federation)?;
    let checkpoint = cfg.checkpoint_path();
    save_checkpoint(&checkpoint, &outcome.global, &cfg.model).map_err(|e| CliError::model("write checkpoint", e))?;
    let mut csv_bytes = Vec::new();
    write_round_csv(&outcome.rounds, &mut csv_bytes).map_err(|e| CliError::model("write round log", e))?;
    write_bytes("write round log", ExitKind::Model, &cfg.output_dir.join("rounds.csv"), &csv_bytes)?;
    write_json("write round log", ExitKind::Model, &cfg.output_dir.join("rounds.json"), &outcome.rounds)?;
    Ok(TrainSummary { checkpoint, rounds: outcome.rounds })
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Defaults to `<output_dir>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub pipeline: PipelineKind,
    /// `None` evaluates once without augmentation; `Some(k)` uses the
    /// configured policy with `k` views.
    pub tta_views: Option<usize>,
    /// Defaults to `tta.num_runs`; forced to 1 without augmentation.
    pub runs: Option<usize>,
    /// Defaults to `<output_dir>/eval/<pipeline>_<tta|no_tta>.csv`.
    pub out: Option<PathBuf>,
}

/// Evaluate a checkpoint on the test manifest and write the run table CSV.
pub fn cmd_eval(cfg: &ExperimentConfig, opts: &EvalOptions) -> Result<(PathBuf, RunTable)> {
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    let ckpt = opts.checkpoint.clone().unwrap_or_else(|| cfg.checkpoint_path());
    let (params, spec) = load_checkpoint(&ckpt).map_err(|e| CliError::model("load checkpoint", e))?;
    if spec != cfg.model {
        return Err(CliError::model(
            "load checkpoint",
            ModelError::Shape(format!("checkpoint model {spec:?} does not match configured model {:?}", cfg.model)),
        ));
    }
    let test = load_manifest(&cfg.manifest_dir().join("test.json"))?;
    let pipeline = cfg.pipeline(opts.pipeline);
    let (policy, runs, tag) = match opts.tta_views {
        None => (TtaPolicy::identity(1), 1, "no_tta".to_string()),
        Some(k) => (TtaPolicy { k, ..cfg.tta.policy.clone() }, opts.runs.unwrap_or(cfg.tta.num_runs), format!("tta{k}")),
    };
    let table = evaluate_tta_runs(&params, &spec, &test, &pipeline, &policy, runs).map_err(|e: TtaError| CliError::model("eval", e))?;
    let kind = match opts.pipeline {
        PipelineKind::Original => "original",
        PipelineKind::Preprocessed => "preprocessed",
    };
    let out = opts.out.clone().unwrap_or_else(|| cfg.output_dir.join("eval").join(format!("{kind}_{tag}.csv")));
    let mut bytes = Vec::new();
    table.write_csv(&mut bytes).map_err(|e| CliError::model("eval", e))?;
    write_bytes("eval", ExitKind::Model, &out, &bytes)?;
    info!("{kind} {tag}: mean accuracy {:.4} over {runs} run(s)", table.mean[0]);
    Ok((out, table))
}

// ---------------------------------------------------------------------------
// compare

#[derive(Debug, Clone, PartialEq)]
pub struct CompareOptions {
    pub csv_a: PathBuf,
    pub csv_b: PathBuf,
    pub metrics: Vec<String>,
    pub alpha: f64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    #[serde(flatten)]
    pub result: TestResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub condition_a: PathBuf,
    pub condition_b: PathBuf,
    pub alpha: f64,
    pub comparisons: Vec<MetricComparison>,
}

fn read_column(path: &Path, metric: &str) -> Result<Vec<f64>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::new(ExitKind::Stats, "compare", format!("{}: {e}", path.display())))?;
    read_metric_column(file, metric).map_err(|e| CliError::new(ExitKind::Stats, "compare", format!("{}: {e}", path.display())))
}

/// Paired comparison of two run tables (differences are B minus A). Writes
/// `compare.json` and `compare.md` to `out_dir`.
pub fn cmd_compare(opts: &CompareOptions) -> Result<CompareReport> {
    if opts.metrics.is_empty() {
        return Err(CliError::new(ExitKind::Usage, "compare", "no metric requested"));
    }
    let runs_a = read_column(&opts.csv_a, "run")?;
    let runs_b = read_column(&opts.csv_b, "run")?;
    if runs_a != runs_b {
        return Err(CliError::new(
            ExitKind::Stats,
            "compare",
            format!("run indices differ: {} rows in A, {} rows in B", runs_a.len(), runs_b.len()),
        ));
    }
    let mut comparisons = Vec::new();
    for metric in &opts.metrics {
        let a = read_column(&opts.csv_a, metric)?;
        let b = read_column(&opts.csv_b, metric)?;
        let samples = PairedSamples::new(a, b).map_err(|e| CliError::stats("compare", e))?;
        let result = compare_conditions(&samples, opts.alpha).map_err(|e| CliError::stats(&format!("compare {metric}"), e))?;
        comparisons.push(MetricComparison { metric: metric.clone(), result });
    }
    let report = CompareReport { condition_a: opts.csv_a.clone(), condition_b: opts.csv_b.clone(), alpha: opts.alpha, comparisons };
    let _lock = OutputLock::acquire(&opts.out_dir)?;
    write_json("compare", ExitKind::Stats, &opts.out_dir.join("compare.json"), &report)?;
    let rows: Vec<(String, TestResult)> = report.comparisons.iter().map(|c| (c.metric.clone(), c.result.clone())).collect();
    write_bytes("compare", ExitKind::Stats, &opts.out_dir.join("compare.md"), markdown_table(&rows).as_bytes())?;
    Ok(report)
}
