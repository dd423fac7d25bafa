use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use timedrl_cli::config::{load_config, Overrides, Precision};
use timedrl_cli::{commands, CliError};

#[derive(Parser)]
#[command(name = "timedrl", version, about = "Self-supervised dual-level time-series representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Path to the run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "runs/out")]
    out: PathBuf,

    /// Root seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Element precision: f32 or f64 (overrides the config file).
    #[arg(long, global = true)]
    precision: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Joint self-supervised pretraining; writes a checkpoint and loss curves.
    Pretrain,
    /// Frozen-encoder linear probe on the configured task.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Semi-supervised fine-tuning grid over label fractions and inits.
    Finetune {
        /// Pretrained checkpoint; omit for the supervised-only baseline arms.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run one ablation axis: pretrain + eval per arm on a shared split.
    Ablate,
    /// Export eval-mode instance embeddings and an anisotropy summary.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Materialize the configured synthetic dataset as a CSV.
    GenData,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        precision: match &cli.precision {
            None => None,
            Some(s) => Some(
                Precision::parse(s)
                    .ok_or_else(|| CliError::Config(format!("--precision: expected f32 or f64, got '{s}'")))?,
            ),
        },
    };
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let cfg = load_config(config_path, &overrides)?;

    match &cli.command {
        Command::Pretrain => {
            let artifacts = commands::cmd_pretrain(&cfg, &cli.out)?;
            println!("checkpoint: {}", artifacts.checkpoint.display());
            println!("losses:     {}", artifacts.losses.display());
        }
        Command::Eval { checkpoint } => {
            let report = commands::cmd_eval(&cfg, checkpoint, &cli.out)?;
            for (k, v) in &report.metrics {
                println!("{k}: {v}");
            }
        }
        Command::Finetune { checkpoint } => {
            let reports = commands::cmd_finetune(&cfg, checkpoint.as_deref(), &cli.out)?;
            for r in &reports {
                let summary: Vec<String> =
                    r.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
                println!(
                    "fraction {} init {}: {}",
                    r.label_fraction,
                    r.init_mode,
                    summary.join(" ")
                );
            }
        }
        Command::Ablate => {
            let outcomes = commands::cmd_ablate(&cfg, &cli.out)?;
            for o in &outcomes {
                let summary: Vec<String> =
                    o.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
                println!("arm {}{}: {}", o.arm, if o.is_control { " (control)" } else { "" }, summary.join(" "));
            }
        }
        Command::ExportEmbeddings { checkpoint } => {
            let artifacts = commands::cmd_export_embeddings(&cfg, checkpoint, &cli.out)?;
            println!("embeddings: {}", artifacts.embeddings.display());
            println!("anisotropy: {}", artifacts.anisotropy.display());
        }
        Command::GenData => {
            let path = commands::cmd_gen_data(&cfg, &cli.out)?;
            println!("dataset: {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
