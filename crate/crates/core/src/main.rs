use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fedtta::cli::{cmd_compare, cmd_eval, cmd_gen_data, cmd_prepare, cmd_train, CliError, CompareOptions, DataSource, EvalOptions, ExitKind, ExperimentConfig};
use fedtta::federation::TransportKind;
use fedtta::imaging::PipelineKind;
use fedtta::synthdata::SynthSpec;

/// Federated training with two preprocessing pipelines, test-time
/// augmentation and paired statistical comparison.
#[derive(Parser)]
#[command(name = "fedtta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set federation.local_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set output_dir=DIR`.
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(d) = &self.output_dir {
            let abs = std::path::absolute(d).map_err(|e| CliError::new(ExitKind::Usage, "config", e.to_string()))?;
            overrides.push(format!("output_dir={}", serde_json::Value::String(abs.display().to_string())));
        }
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    InProcess,
    Socket,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pipeline {
    Original,
    Preprocessed,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest images, deduplicate, split and partition.
    Prepare(ConfigArgs),
    /// Run federated training on the prepared partitions.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "in-process")]
        transport: Transport,
    },
    /// Evaluate a checkpoint with or without test-time augmentation.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to `<output_dir>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "original")]
        pipeline: Pipeline,
        /// Number of augmented views per image.
        #[arg(long, value_name = "K", conflicts_with = "no_tta")]
        tta: Option<usize>,
        /// Single deterministic evaluation.
        #[arg(long)]
        no_tta: bool,
        /// Repeated TTA runs (defaults to `tta.num_runs`).
        #[arg(long, value_name = "N")]
        runs: Option<usize>,
        /// Output CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired comparison of two run tables (B minus A).
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        csv_a: PathBuf,
        csv_b: PathBuf,
        /// Metric column; repeat for several (defaults to `stats.metric`).
        #[arg(long = "metric")]
        metrics: Vec<String>,
        /// Defaults to `stats.alpha`.
        #[arg(long)]
        alpha: Option<f64>,
        /// Report directory (defaults to `<output_dir>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic image corpus.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Target directory.
        #[arg(long)]
        out: PathBuf,
        /// Use the full-size class counts with planted duplicates.
        #[arg(long)]
        full_scale: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Prepare(args) => {
            let report = cmd_prepare(&args.load()?)?;
            println!(
                "{} files, {} duplicates removed, train {:?}, test {:?}",
                report.files_found, report.duplicates_removed, report.train_counts, report.test_counts
            );
        }
        Command::Train { cfg, transport } => {
            let transport = match transport {
                Transport::InProcess => TransportKind::InProcess,
                Transport::Socket => TransportKind::Socket,
            };
            let summary = cmd_train(&cfg.load()?, transport)?;
            if let Some(last) = summary.rounds.last() {
                println!("final global accuracy {:.4}; checkpoint {}", last.global_accuracy, summary.checkpoint.display());
            }
        }
        Command::Eval { cfg, checkpoint, pipeline, tta, no_tta, runs, out } => {
            let cfg = cfg.load()?;
            let opts = EvalOptions {
                checkpoint,
                pipeline: match pipeline {
                    Pipeline::Original => PipelineKind::Original,
                    Pipeline::Preprocessed => PipelineKind::Preprocessed,
                },
                tta_views: if no_tta { None } else { Some(tta.unwrap_or(cfg.tta.policy.k)) },
                runs,
                out,
            };
            let (path, table) = cmd_eval(&cfg, &opts)?;
            println!("accuracy {:.4} ± {:.4}; wrote {}", table.mean[0], table.std[0], path.display());
        }
        Command::Compare { cfg, csv_a, csv_b, metrics, alpha, out } => {
            let cfg = cfg.load()?;
            let opts = CompareOptions {
                csv_a,
                csv_b,
                metrics: if metrics.is_empty() { vec![cfg.stats.metric.clone()] } else { metrics },
                alpha: alpha.unwrap_or(cfg.stats.alpha),
                out_dir: out.unwrap_or_else(|| cfg.output_dir.clone()),
            };
            let report = cmd_compare(&opts)?;
            for c in &report.comparisons {
                println!("{}: {} p = {:.4}", c.metric, c.result.method, c.result.p_value);
            }
        }
        Command::GenData { cfg, out, full_scale } => {
            let cfg = cfg.load()?;
            let spec = match (&cfg.data.source, full_scale) {
                (_, true) => SynthSpec::full_scale(),
                (DataSource::Synthetic(s), false) => s.clone(),
                (DataSource::Dir(_), false) => SynthSpec::default(),
            };
            let m = cmd_gen_data(&spec, &out)?;
            println!("wrote {} images to {}", m.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { ExitKind::Usage.code() } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.code())
        }
    }
}
