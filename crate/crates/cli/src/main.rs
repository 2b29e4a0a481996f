use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use tinyalign_cli::{
    format_gen_report, run_eval, run_gcw_table, run_gen_data, run_servo_cmd, run_train,
    EstimatorSpec,
};
use tinyalign_core::config::ExperimentConfig;
use tinyalign_core::model::Variant;

#[derive(Parser)]
#[command(
    name = "tinyalign",
    about = "Synthetic two-camera visual-servoing toolkit: data generation, training, evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect measurement groups and write the training dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory for the dataset and manifest.
        #[arg(long, default_value = "runs/gen")]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train one variant on an existing dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// mph, sph, or plain.
        #[arg(long, default_value = "mph")]
        variant: String,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Closed-loop evaluation over seeded trials at every tolerance tier.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mph: Option<PathBuf>,
        #[arg(long)]
        sph: Option<PathBuf>,
        #[arg(long)]
        plain: Option<PathBuf>,
        /// Add a ground-truth estimator row.
        #[arg(long)]
        oracle: bool,
        /// Add a noisy ground-truth row with this sigma (meters).
        #[arg(long)]
        noisy_oracle: Option<f64>,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
        /// Trials per variant and tier (defaults to the config value).
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run servo trials and export per-tick traces.
    Servo {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "mph")]
        variant: String,
        /// Drive the loop from simulator ground truth instead of a model.
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "runs/servo")]
        out: PathBuf,
    },
    /// Emit the per-head loss-weight table as CSV.
    GcwTable {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/gcw")]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => {
            let cfg = ExperimentConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn parse_variant(s: &str) -> Result<Variant> {
    Variant::parse(s).ok_or_else(|| anyhow::anyhow!("unknown variant {s} (mph|sph|plain)"))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { config, out, seed } => {
            let cfg = load_config(&config)?;
            let report = run_gen_data(&cfg, &out, seed)?;
            println!("{}", format_gen_report(&report, &cfg.build_bank()?));
        }
        Command::Train {
            config,
            dataset,
            variant,
            out,
            seed,
            epochs,
        } => {
            let cfg = load_config(&config)?;
            let variant = parse_variant(&variant)?;
            let report = run_train(&cfg, &dataset, variant, &out, seed, epochs)?;
            if let Some(last) = report.history.last() {
                println!(
                    "trained {} for {} epochs: loss {:.4}, close-range error {:.5} m",
                    variant.name(),
                    report.history.len(),
                    last.loss,
                    last.close_range_error
                );
            }
            println!("checkpoint: {}", report.checkpoint_path.display());
            println!("history:    {}", report.history_path.display());
        }
        Command::Eval {
            config,
            mph,
            sph,
            plain,
            oracle,
            noisy_oracle,
            out,
            trials,
            seed,
        } => {
            let cfg = load_config(&config)?;
            let mut specs = Vec::new();
            if oracle {
                specs.push(EstimatorSpec::Oracle);
            }
            if let Some(sigma) = noisy_oracle {
                specs.push(EstimatorSpec::NoisyOracle { sigma });
            }
            for (variant, path) in [
                (Variant::Mph, mph),
                (Variant::Sph, sph),
                (Variant::Plain, plain),
            ] {
                if let Some(path) = path {
                    specs.push(EstimatorSpec::Checkpoint { variant, path });
                }
            }
            if specs.is_empty() {
                bail!("nothing to evaluate: pass --oracle or a checkpoint");
            }
            let trials = trials.unwrap_or(cfg.eval.trials);
            let table = run_eval(&cfg, &specs, &out, trials, seed)?;
            print!("{}", table.to_text());
        }
        Command::Servo {
            config,
            checkpoint,
            variant,
            oracle,
            trials,
            seed,
            out,
        } => {
            let cfg = load_config(&config)?;
            let spec = if oracle {
                EstimatorSpec::Oracle
            } else if let Some(path) = checkpoint {
                EstimatorSpec::Checkpoint {
                    variant: parse_variant(&variant)?,
                    path,
                }
            } else {
                bail!("pass --oracle or --checkpoint");
            };
            let outcomes = run_servo_cmd(&cfg, &spec, &out, trials, seed)?;
            for (i, o) in outcomes.iter().enumerate() {
                println!(
                    "trial {i}: success={} final_error={:.5} m ticks={}{}",
                    o.success,
                    o.final_error,
                    o.trace.records.len(),
                    o.failure
                        .as_ref()
                        .map(|f| format!(" ({f})"))
                        .unwrap_or_default()
                );
            }
        }
        Command::GcwTable { config, out } => {
            let cfg = load_config(&config)?;
            let path = run_gcw_table(&cfg, &out)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
