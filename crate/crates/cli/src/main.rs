use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tformer_lab::ablate::Axis;
use tformer_lab::commands::{ablate_cmd, attnmap_cmd, eval_cmd, gen, prepare, threads_from_env, train_cmd};
use tformer_lab::{CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "tformer-lab", version, about = "Synthetic video-QA experiments with the T-Former")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment TOML.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and print its checksum.
    Gen(Common),
    /// Train, writing checkpoints and metrics.csv.
    Train(Common),
    /// Test accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to checkpoints/best.ckpt under the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep one axis: strategy | layers | heads | ratio | init | module | ffn.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
    },
    /// Export frame-level cross-attention maps for test samples.
    Attnmap {
        #[command(flatten)]
        common: Common,
        /// Test-split sample indices.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        samples: Vec<usize>,
        /// Epochs whose checkpoints to load; defaults to the last.
        #[arg(long, value_delimiter = ',')]
        epochs: Vec<u64>,
    },
}

fn setup(c: Common) -> CliResult<ExperimentConfig> {
    prepare(ExperimentConfig::load(&c.config)?, c.out, c.seed)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen(c) => {
            let cfg = setup(c)?;
            println!("checksum {}", gen(&cfg)?);
        }
        Command::Train(c) => {
            let cfg = setup(c)?;
            let s = train_cmd(&cfg)?;
            println!("best epoch {} val {:.4} test {:.4}", s.best_epoch, s.best_val, s.test);
        }
        Command::Eval { common, checkpoint } => {
            let cfg = setup(common)?;
            print!("{}", eval_cmd(&cfg, checkpoint.as_deref())?);
        }
        Command::Ablate { common, axis } => {
            let axis: Axis = axis.parse()?;
            let threads = threads_from_env()?;
            let cfg = setup(common)?;
            print!("{}", ablate_cmd(&cfg, axis, threads)?);
        }
        Command::Attnmap { common, samples, epochs } => {
            let cfg = setup(common)?;
            let epochs = if epochs.is_empty() { vec![cfg.epochs] } else { epochs };
            for r in attnmap_cmd(&cfg, &samples, &epochs)? {
                println!("{} planted_argmax {:.3}", r.stem, r.planted_argmax);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tformer-lab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
