use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gemfi::run::{cmd_eval, cmd_heatmap, cmd_sweep, cmd_train, exit_code, CommandArgs};

#[derive(Parser)]
#[command(name = "gem", version, about = "Train, evaluate and ablate evidential uncertainty models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, history, config echo and manifest.
    Train(Common),
    /// Write calibration and OOD detection metrics (trains first if no checkpoint exists).
    Eval(Common),
    /// Write a score grid CSV and SVG for a 2-D model.
    Heatmap(Common),
    /// Train and evaluate every ablation cell for every seed.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint for eval/heatmap; defaults to <out>/checkpoint.json.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (run, common): (fn(&CommandArgs) -> gemfi::Result<()>, Common) = match cli.command {
        Command::Train(c) => (cmd_train, c),
        Command::Eval(c) => (cmd_eval, c),
        Command::Heatmap(c) => (cmd_heatmap, c),
        Command::Sweep(c) => (cmd_sweep, c),
    };
    let args = CommandArgs {
        config: common.config,
        out: common.out,
        seed: common.seed,
        checkpoint: common.checkpoint,
    };
    let result = run(&args);
    if let Err(e) = &result {
        log::error!("{e}");
    }
    ExitCode::from(exit_code(&result) as u8)
}
