use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sedlab::ablation::{self, DEFAULT_SEEDS};
use sedlab::config::parse_config;
use sedlab::{report, synthdata, trainer, Error, Result};

/// Learning with noisy labels on synthetic Gaussian clusters.
#[derive(Debug, Parser)]
#[command(name = "sedlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the noisy training split and the test split as CSV.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train once and write epochs.csv, summary.json and curves.svg.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a built-in grid (components, m-sweep, alpha-sweep) or one variant over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: usize,
    },
    /// Rebuild curves.svg and the summary of a run directory from its epochs.csv.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load(config: &Path, seed: Option<u64>) -> Result<sedlab::TrainConfig> {
    let mut c = parse_config(config)?;
    if let Some(s) = seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen { config, out, seed } => {
            let c = load(&config, seed)?;
            let (train, test) = trainer::build_datasets(&c)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            synthdata::write_csv(&train, out.join("train.csv"))?;
            synthdata::write_csv(&test, out.join("test.csv"))?;
            let info = serde_json::json!({
                "dataset_hash": trainer::datasets_hash(&train, &test),
                "train_samples": train.len(),
                "test_samples": test.len(),
                "num_classes": train.num_classes,
                "corrupted_fraction": train.corrupted_fraction(),
            });
            let path = out.join("dataset.json");
            let text = serde_json::to_string_pretty(&info).expect("json") + "\n";
            std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
            println!(
                "wrote {} train and {} test samples to {}",
                train.len(),
                test.len(),
                out.display()
            );
        }
        Command::Train { config, out, seed } => {
            let c = load(&config, seed)?;
            let started = now();
            let ckpt = out.join("checkpoints");
            let outcome = trainer::train(&c, c.checkpoint_every.map(|_| ckpt.as_path()))?;
            report::write_run(&outcome.report, &out, Some(&started))?;
            let s = &outcome.report.summary;
            if let (Some(a), Some(b)) = (s.final_acc_a, s.final_acc_b) {
                println!("final test accuracy: robust {a:.4}, baseline {b:.4}");
            }
        }
        Command::Ablate {
            config,
            grid,
            out,
            seeds,
        } => {
            let c = load(&config, None)?;
            let started = now();
            let results = ablation::ablate(&c, &grid, seeds, Some(&out), Some(&started))?;
            for r in &results {
                println!(
                    "{:<22} robust {:.4} +/- {:.4}   baseline {:.4} +/- {:.4}",
                    r.variant.name, r.acc_a.0, r.acc_a.1, r.acc_b.0, r.acc_b.1
                );
            }
        }
        Command::Report { run } => {
            let s = report::regenerate(&run)?;
            println!("{} epochs re-rendered in {}", s.epochs, run.display());
        }
    }
    Ok(())
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
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
