use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mccot::eval::commands::{self, CommandError, ExperimentConfig};
use mccot::pipeline::AblationMode;

/// Self-consistency (voted-logit) training for two-stage multimodal reasoning.
#[derive(Parser, Debug)]
#[command(name = "mccot", version)]
struct Cli {
    /// JSON experiment config (dataset, model, train, eval sections); defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train/val/test JSONL splits.
    GenData,
    /// Train both stages, save checkpoints, evaluate on the test split.
    Train {
        /// Directory with train/val/test JSONL files; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate saved checkpoints on the test split.
    Eval {
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        stage2: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and evaluate every (mode, seed) pair.
    Ablate {
        /// Comma-separated modes; all of them when omitted.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Finite-difference check of the full voted loss on a toy model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Vote over a logit stack file ({"shape": [N, L, V], "data": [...]}).
    Vote {
        #[arg(long)]
        stack: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CommandError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let out = cli.out.as_path();
    match cli.command {
        Command::GenData => {
            for path in commands::gen_data(&cfg, out)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Train { data } => {
            let data = commands::load_data(&cfg, data.as_deref())?;
            let r = commands::train(&cfg, &data, out)?;
            println!("test_accuracy {:.4} rouge_l {:.4} -> {}", r.test_accuracy, r.rouge_l, out.display());
        }
        Command::Eval { stage1, stage2, data } => {
            let data = commands::load_data(&cfg, data.as_deref())?;
            let r = commands::eval(&cfg, &data.test, stage1.as_deref(), &stage2, out)?;
            println!("test_accuracy {:.4} rouge_l {:.4} -> {}", r.test_accuracy, r.rouge_l, out.display());
        }
        Command::Ablate { modes, seeds } => {
            let modes = if modes.is_empty() {
                AblationMode::ALL.to_vec()
            } else {
                modes
                    .iter()
                    .map(|m| {
                        AblationMode::parse(m.trim()).ok_or_else(|| CommandError::Config(format!("unknown mode {m:?}")))
                    })
                    .collect::<Result<_, _>>()?
            };
            let (_, summary) = commands::ablate(&cfg, &modes, seeds, out, |row| {
                eprintln!(
                    "{} seed {}: accuracy {:.4} rouge_l {:.4}",
                    row.mode, row.seed, row.test_accuracy, row.rouge_l
                );
            })?;
            for s in summary {
                println!(
                    "{:<18} accuracy {:.4} ± {:.4}  rouge_l {:.4}",
                    s.mode.name(),
                    s.accuracy_mean,
                    s.accuracy_std,
                    s.rouge_l_mean
                );
            }
        }
        Command::Gradcheck { tolerance } => {
            let r = commands::gradcheck(tolerance)?;
            println!(
                "max_rel_error {:e} max_abs_error {:e} over {} coordinates",
                r.max_rel_error, r.max_abs_error, r.coordinates
            );
        }
        Command::Vote { stack } => {
            println!("wrote {}", commands::vote(&cfg, &stack, out)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
