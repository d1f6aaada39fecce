//! `hetvar`: command-line driver for data generation, training, post-hoc
//! fitting, evaluation, full experiments and sweeps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hetvar_core::harness::{
    evaluate_checkpoints, posthoc_checkpoints, prepare_data, run_holdout_size_sweep, run_pipeline,
    run_weight_decay_sweep, train_checkpoints, write_datasets, write_report_dir, ExperimentConfig,
    ExperimentReport, SweepReport,
};
use hetvar_core::metrics::metrics_csv;

#[derive(Parser)]
#[command(name = "hetvar", version, about = "Post-hoc variance heads for heteroskedastic regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load) the configured dataset and write its splits as CSV.
    GenData(Common),
    /// Train the backbone and end-to-end baselines; write checkpoints.
    Train(Common),
    /// Fit post-hoc variance heads over the backbone checkpoint.
    Posthoc(Common),
    /// Evaluate checkpoints on the test (and OOD) split; write the report.
    Evaluate(Common),
    /// Run the whole pipeline and write the report directory.
    Experiment(Common),
    /// Hold-out-size or weight-decay sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = SweepKind::HoldoutSize)]
        kind: SweepKind,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Format of the summary printed to stdout.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    HoldoutSize,
    WeightDecay,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn checkpoint_root(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

fn print_report(report: &ExperimentReport, format: Format) -> Result<()> {
    match format {
        Format::Csv => print!("{}", metrics_csv(&report.records)),
        Format::Json => println!("{}", serde_json::to_string_pretty(report)?),
    }
    for f in &report.failures {
        eprintln!("failed cell: {} seed {}: {}", f.method, f.seed, f.message);
    }
    Ok(())
}

fn print_sweep(report: &SweepReport, format: Format) -> Result<()> {
    match format {
        Format::Csv => print!("{}", report.summary_csv()),
        Format::Json => println!("{}", serde_json::to_string_pretty(report)?),
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let mut cfg = load_config(&c)?;
            if let Some(s) = c.seed {
                cfg.dataset.seed = s;
            }
            let data = prepare_data(&cfg.dataset)?;
            for p in write_datasets(&data, &c.out_dir)? {
                println!("{}", p.display());
            }
        }
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let data = prepare_data(&cfg.dataset)?;
            let summary = train_checkpoints(&cfg, &data, &checkpoint_root(&c.out_dir))?;
            write_json(&c.out_dir.join("train_summary.json"), &summary)?;
            for f in &summary.failures {
                eprintln!("failed cell: {} seed {}: {}", f.method, f.seed, f.message);
            }
        }
        Command::Posthoc(c) => {
            let cfg = load_config(&c)?;
            let data = prepare_data(&cfg.dataset)?;
            let summary = posthoc_checkpoints(&cfg, &data, &checkpoint_root(&c.out_dir))?;
            write_json(&c.out_dir.join("posthoc_summary.json"), &summary)?;
        }
        Command::Evaluate(c) => {
            let cfg = load_config(&c)?;
            let data = prepare_data(&cfg.dataset)?;
            let report = evaluate_checkpoints(&cfg, &data, &checkpoint_root(&c.out_dir))?;
            write_report_dir(&report, &c.out_dir)?;
            print_report(&report, c.format)?;
        }
        Command::Experiment(c) => {
            let cfg = load_config(&c)?;
            let report = run_pipeline(&cfg)?;
            write_report_dir(&report, &c.out_dir)?;
            print_report(&report, c.format)?;
        }
        Command::Sweep { common: c, kind } => {
            let cfg = load_config(&c)?;
            let report = match kind {
                SweepKind::HoldoutSize => run_holdout_size_sweep(&cfg, &cfg.sweep.holdout_sizes)?,
                SweepKind::WeightDecay => run_weight_decay_sweep(&cfg, &cfg.sweep.weight_decay_grid)?,
            };
            report.write_dir(&c.out_dir)?;
            print_sweep(&report, c.format)?;
        }
    }
    Ok(())
}

fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let core = err.downcast_ref::<hetvar_core::Error>();
    serde_json::json!({
        "error": {
            "kind": core.map_or("other", |e| e.kind()),
            "message": format!("{err:#}"),
            "path": core.and_then(|e| e.path()).map(|p| p.display().to_string()),
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
