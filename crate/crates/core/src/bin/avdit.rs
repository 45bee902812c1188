use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use avdit::cli::{cmd_eval, cmd_gradcheck, cmd_sample, cmd_train, EvalArgs, SampleArgs, EXIT_USAGE};
use avdit::tasks::TaskKind;

#[derive(Parser)]
#[command(name = "avdit", version, about = "Train, sample and evaluate a toy audio-video diffusion transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the three-stage curriculum described by a config file.
    Train { config: PathBuf },
    /// Generate latents for one task from a checkpoint.
    Sample {
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: TaskKind,
        /// Comma-separated event ids to caption, one per video frame.
        #[arg(long, value_delimiter = ',')]
        events: Option<Vec<usize>>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tensor-table file with the first-frame latent (I2V, I2AV).
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Score T2AV generations with the alignment oracle.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, short)]
        n: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Finite-difference check of every operation and a small model.
    Gradcheck {
        config: Option<PathBuf>,
        /// Add a deliberately wrong backward rule (negative control).
        #[arg(long)]
        inject_fault: bool,
    },
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    TaskKind::parse(s).ok_or_else(|| format!("unknown task `{s}` (t2v, t2a, t2av, i2v, i2av)"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    let code = match cli.command {
        Command::Train { config } => cmd_train(&config),
        Command::Sample { checkpoint, task, events, steps, seed, image, out } => {
            cmd_sample(&SampleArgs { checkpoint, task, events, steps, seed, image, out })
        }
        Command::Eval { checkpoint, data, n, steps, out } => {
            cmd_eval(&EvalArgs { checkpoint, data_config: data, n, steps, out })
        }
        Command::Gradcheck { config, inject_fault } => cmd_gradcheck(config.as_deref(), inject_fault),
    };
    ExitCode::from(code as u8)
}
