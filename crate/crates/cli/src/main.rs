//! `sb`: verification suites, kernel benchmarks, training sweeps and
//! attention dumps for stick-breaking attention.
//!
//! Exit status: 0 when every check passes, 1 when a check fails, 2 on a
//! configuration or runtime error.

mod commands;
mod run;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stickbreaking::verify::{BenchInput, Fault, Precision};

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

#[derive(Parser)]
#[command(name = "sb", version, about = "Stick-breaking attention harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `runs/<command>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (1 = sequential, 0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    /// Negate the analytic key gradient of the reference head.
    FlipKeyGrad,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputArg {
    Saturating,
    Random,
    Negative,
}

impl From<InputArg> for BenchInput {
    fn from(i: InputArg) -> Self {
        match i {
            InputArg::Saturating => BenchInput::Saturating,
            InputArg::Random => BenchInput::Random,
            InputArg::Negative => BenchInput::Negative,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every backward rule.
    Gradcheck {
        /// Replace every tolerance with this value.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Corrupt one analytic gradient to exercise failure reporting.
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Tiled kernels against the dense reference.
    Equiv,
    /// Kernel timings with block skipping on and off.
    Bench {
        #[arg(long, value_enum)]
        input: Option<InputArg>,
    },
    /// Learning-rate sweep for a recall or character-LM experiment.
    Train,
    /// Held-out NLL of checkpoints at growing context lengths.
    EvalLength {
        /// Checkpoint files (repeatable). Without one, a freshly initialised
        /// model is evaluated.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Attention maps of a model (or of a saturated toy head) as CSV and SVG.
    DumpAttn {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Recall pairs such as "B6 P4 E3 X1 Z2 | E2 B1 E5 B4", or a JSON-lines
        /// task file (first instance is used).
        #[arg(long)]
        instance: Option<String>,
        /// Dump a single head on saturating inputs of this length instead.
        #[arg(long)]
        saturating: Option<usize>,
    },
    /// Write recall task instances as JSON lines.
    GenTask {
        #[arg(long)]
        count: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gradcheck { .. } => "gradcheck",
            Command::Equiv => "equiv",
            Command::Bench { .. } => "bench",
            Command::Train => "train",
            Command::EvalLength { .. } => "eval-length",
            Command::DumpAttn { .. } => "dump-attn",
            Command::GenTask { .. } => "gen-task",
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<Outcome> {
    let name = cli.command.name();
    let out = cli
        .common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(name));
    let mut ctx = run::RunContext::new(
        name,
        out,
        cli.common.seed,
        cli.common.threads,
        cli.common.precision.map(Precision::from),
    )?;
    let config = cli.common.config.as_deref();
    match cli.command {
        Command::Gradcheck {
            tolerance,
            inject_fault,
        } => commands::gradcheck(
            &mut ctx,
            config,
            tolerance,
            inject_fault.map(|_| Fault::FlipKeyGrad),
        ),
        Command::Equiv => commands::equiv(&mut ctx, config),
        Command::Bench { input } => commands::bench(&mut ctx, config, input.map(BenchInput::from)),
        Command::Train => commands::train(&mut ctx, config),
        Command::EvalLength { checkpoint } => commands::eval_length(&mut ctx, config, &checkpoint),
        Command::DumpAttn {
            checkpoint,
            instance,
            saturating,
        } => commands::dump_attn(
            &mut ctx,
            config,
            checkpoint.as_deref(),
            instance.as_deref(),
            saturating,
        ),
        Command::GenTask { count } => commands::gen_task(&mut ctx, config, count),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
