mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Frequency attention knowledge distillation.
#[derive(Parser, Debug)]
#[command(name = "famkd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML config file; keys not set keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set trainer.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model with cross-entropy only.
    TrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// CIFAR-100 binary directory, or `synthetic`.
        #[arg(long)]
        data: String,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student against a fixed teacher checkpoint.
    Distill {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: String,
    },
    /// Dump FAM frequency magnitudes for one image as CSV.
    Spectrum {
        #[arg(long)]
        ckpt: PathBuf,
        /// Student stage whose FAM site is inspected.
        #[arg(long)]
        stage: usize,
        /// Raw image: 3072 bytes, channel-major 32×32 RGB.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every oracle suite and print the CSV report.
    Selftest,
}

fn run(cli: Cli) -> Result<(), commands::Failure> {
    match cli.command {
        Command::TrainTeacher { cfg, data, out } => commands::train_teacher(&cfg, &data, &out),
        Command::Distill { cfg, teacher, data, out } => commands::distill(&cfg, &teacher, &data, &out),
        Command::Eval { cfg, ckpt, data } => commands::eval(&cfg, &ckpt, &data),
        Command::Spectrum { ckpt, stage, input, out } => commands::spectrum(&ckpt, stage, &input, &out),
        Command::Selftest => commands::selftest(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
        Err(_) => ExitCode::from(2),
    }
}
