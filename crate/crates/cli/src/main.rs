mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spsr_core::data::SynthKind;
use spsr_core::train::Ablation;

/// Structure-preserving ×4 super resolution.
#[derive(Parser, Debug)]
#[command(name = "spsr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic HR dataset.
    SynthData {
        /// edges, checker or ramps (alias gradients-ramps).
        #[arg(long, default_value = "edges")]
        kind: SynthKind,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write bicubic ×1/4 copies here.
        #[arg(long)]
        lr_out: Option<PathBuf>,
    },
    /// Supervised pretraining of the generator only.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Pretraining (unless --init is given), then adversarial training.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Start adversarial training from this checkpoint's generator.
        #[arg(long)]
        init: Option<PathBuf>,
        /// full, no-gb, no-gl or baseline.
        #[arg(long)]
        ablation: Option<Ablation>,
    },
    /// Super-resolve every PNG in a directory.
    Infer {
        #[arg(long, required_unless_present = "bicubic")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Feed zeros instead of gradient-branch features into fusion.
        #[arg(long)]
        zero_grad_features: bool,
        /// Plain bicubic ×4 upsampling instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        bicubic: bool,
    },
    /// Write min-max normalized gradient maps of every PNG in a directory.
    ExtractGrad {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score SR images against HR images paired by file name.
    Eval {
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        hr: PathBuf,
        /// Pixels cropped from each side before scoring.
        #[arg(long, default_value_t = 4)]
        border: usize,
        /// PSNR on luma instead of RGB.
        #[arg(long)]
        y_channel: bool,
        /// Write per-image and summary records as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot the loss logs of a run directory and summarize them.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Directory of HR training PNGs.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints, logs and samples.
    #[arg(long)]
    out: PathBuf,
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set loss.beta_gm=0.02.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Steps of this stage.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from latest.spsr in the run directory.
    #[arg(long)]
    resume: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match std::panic::catch_unwind(|| commands::dispatch(cli.command)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
        Err(_) => ExitCode::from(2),
    }
}
