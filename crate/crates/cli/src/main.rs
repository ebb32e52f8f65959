use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use discurate::eval::{predictions_from_jsonl, score_dataset};
use discurate::pipeline::{config_schema, manifest_schema, Pipeline, PipelineConfig, Stage};
use discurate::taskgen;

#[derive(Parser)]
#[command(
    name = "discurate",
    version,
    about = "Curate dialogue data from annotated 3D scans"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run pipeline stages over the scenes listed in a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of clean,annotate,graph,refer,generate.
        #[arg(long, default_value = "clean,annotate,graph,refer,generate")]
        stages: String,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// Writes every oracle exchange of this run as a mock script.
        #[arg(long)]
        record_oracle: Option<PathBuf>,
    },
    /// Score predictions against a generated dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Writes the JSON report here instead of standard output.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the JSON schema of the config file or of scene manifests.
    Schema {
        #[arg(long)]
        manifest: bool,
    },
}

fn run(
    config: &Path,
    stages: &str,
    seed: Option<u64>,
    output: Option<PathBuf>,
    workers: Option<usize>,
    record: Option<PathBuf>,
) -> Result<()> {
    let text =
        std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut cfg = PipelineConfig::from_toml(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = output {
        cfg.output_dir = std::path::absolute(o)?;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    let stages: BTreeSet<Stage> = Stage::parse_list(stages)?;
    let base = config.parent().unwrap_or_else(|| Path::new("."));
    let pipeline = Pipeline::new(cfg, base)?;
    let result = pipeline.run(&stages);
    if let Some(path) = record {
        let lines: String = pipeline
            .recorded_script()
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect();
        std::fs::write(&path, lines).with_context(|| format!("writing {}", path.display()))?;
    }
    let summary = result?;
    println!(
        "{:<10} {:>6} {:>7} {:>13} {:>9}",
        "stage", "units", "cached", "oracle calls", "failures"
    );
    for s in &summary.stages {
        println!(
            "{:<10} {:>6} {:>7} {:>13} {:>9}",
            s.stage.map(|s| s.name()).unwrap_or("-"),
            s.units,
            s.cached,
            s.oracle_calls,
            s.failures
        );
    }
    println!("artifacts in {}", pipeline.output_dir().display());
    Ok(())
}

fn eval(dataset: &Path, predictions: &Path, report: Option<PathBuf>) -> Result<()> {
    let samples = taskgen::from_jsonl(
        &std::fs::read_to_string(dataset)
            .with_context(|| format!("reading {}", dataset.display()))?,
    )
    .with_context(|| format!("parsing {}", dataset.display()))?;
    let preds = predictions_from_jsonl(
        &std::fs::read_to_string(predictions)
            .with_context(|| format!("reading {}", predictions.display()))?,
    )
    .with_context(|| format!("parsing {}", predictions.display()))?;
    let scores = score_dataset(&samples, &preds)?;
    let json = serde_json::to_string_pretty(&scores)? + "\n";
    match report {
        Some(path) => {
            print!("{}", scores.render_table());
            std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        }
        None => {
            eprint!("{}", scores.render_table());
            print!("{json}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            stages,
            seed,
            output,
            workers,
            record_oracle,
        } => run(&config, &stages, seed, output, workers, record_oracle),
        Command::Eval {
            dataset,
            predictions,
            report,
        } => eval(&dataset, &predictions, report),
        Command::Schema { manifest } => {
            let schema = if manifest {
                manifest_schema()
            } else {
                config_schema()
            };
            println!(
                "{}",
                serde_json::to_string_pretty(&schema).expect("schema serializes")
            );
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
