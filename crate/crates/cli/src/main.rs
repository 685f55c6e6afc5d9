//! `gclview` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data, I/O,
//! checkpoint or runtime error, 3 self-test failure.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gclview::config::ExperimentConfig;
use gclview::dataset::DataFormat;
use gclview::harness;

#[derive(Parser)]
#[command(
    name = "gclview",
    version,
    about = "Graph contrastive learning with learnable view generators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    protocol: Option<String>,
    /// Worker threads for folds.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to use instead of the one recorded in the checkpoint.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Format of `--dataset` (tu or json).
    #[arg(long)]
    format: Option<DataFormat>,
}

#[derive(Subcommand)]
enum Command {
    /// Train under the configured protocol and strategy.
    Train(ExperimentArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        ck: CheckpointArgs,
        /// Also write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep fixed augmentations over ratios and write a CSV table.
    Ablate(ExperimentArgs),
    /// Write (original, view1, view2) triplets as JSON and DOT.
    ExportViews {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long, default_value_t = 4)]
        n_samples: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write frozen graph embeddings as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient and sampler suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn resolve(args: &ExperimentArgs) -> gclview::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let mut overrides = args.set.clone();
    let flags = [
        (
            "output_dir",
            args.out.as_ref().map(|p| p.display().to_string()),
        ),
        ("seed", args.seed.map(|s| s.to_string())),
        ("folds", args.folds.map(|f| f.to_string())),
        ("strategy", args.strategy.clone()),
        ("protocol", args.protocol.clone()),
        ("jobs", args.jobs.map(|j| j.to_string())),
    ];
    overrides.extend(
        flags
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| format!("{k}={v}"))),
    );
    cfg.apply_overrides(&overrides)?;
    Ok(cfg)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<gclview::Error>() {
        Some(gclview::Error::Config(_)) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Train(args) => {
            let cfg = resolve(&args)?;
            let report = harness::cmd_train(&cfg)?;
            let s = &report.summary;
            println!(
                "{} / {} on {}: test {:.2} ± {:.2} % over {} runs (train {:.2} %)",
                cfg.protocol,
                cfg.strategy,
                cfg.dataset.display(),
                100.0 * s.test_mean,
                100.0 * s.test_std,
                s.runs,
                100.0 * s.train_mean
            );
            println!("metrics: {}", report.metrics.display());
            for c in &report.checkpoints {
                println!("checkpoint: {}", c.display());
            }
        }
        Command::Eval { ck, out } => {
            let report = harness::cmd_eval(&ck.checkpoint, ck.dataset.as_deref(), ck.format)?;
            let text = serde_json::to_string_pretty(&report)?;
            println!("{text}");
            if let Some(path) = out {
                std::fs::write(&path, text)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Ablate(args) => {
            let cfg = resolve(&args)?;
            let path = harness::cmd_ablate(&cfg)?;
            print!("{}", std::fs::read_to_string(&path)?);
            println!("wrote {}", path.display());
        }
        Command::ExportViews {
            ck,
            n_samples,
            out,
            seed,
        } => {
            let files = harness::cmd_export_views(
                &ck.checkpoint,
                ck.dataset.as_deref(),
                ck.format,
                n_samples,
                &out,
                seed,
            )?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Command::ExportEmbeddings { ck, out } => {
            let path = harness::cmd_export_embeddings(
                &ck.checkpoint,
                ck.dataset.as_deref(),
                ck.format,
                &out,
            )?;
            println!("wrote {}", path.display());
        }
        Command::Selftest { seed } => {
            let (ok, checks) = harness::cmd_selftest(seed);
            for c in &checks {
                println!(
                    "{} {:<8} {:<22} {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.suite,
                    c.name,
                    c.detail
                );
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("selftest: {} checks, {failed} failed", checks.len());
            return Ok(if ok { 0 } else { 3 });
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
