//! Command-line front end: `dapose {generate|train|eval|ablate|fit|stats}`.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_ablate, cmd_eval, cmd_fit, cmd_generate, cmd_stats, cmd_train, TrainFlags};
pub use config::ExperimentConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dapose", version, about = "Domain-adapted keypoint estimation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// JSON config; defaults are used for anything it omits.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for training, generation and the probe.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Generate(Common),
    /// Run the classifier warm-up and alternating stages (or plain fine-tuning).
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
        /// Stop after this many cycles.
        #[arg(long)]
        max_cycles: Option<usize>,
    },
    /// Score a checkpoint (or a detections file) on data.test.
    Eval(Common),
    /// Train and evaluate every point of the ablation grid.
    Ablate(Common),
    /// Fit body pose to 2D annotations, producing a pose library.
    Fit(Common),
    /// Pose-distribution statistics of datasets.
    Stats(Common),
}

/// Exit code for a failure: configuration problems 1, bad or missing data 2,
/// everything else 3.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use dapose::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::ConfigMismatch { .. } => EXIT_CONFIG,
                E::Data(_) | E::Parse { .. } | E::Io { .. } | E::Input(_) | E::Undefined(_) | E::Image(_) | E::Json(_) => {
                    EXIT_DATA
                }
                E::SafeTensors(_) => EXIT_DATA,
                E::Shape { .. } | E::Projection { .. } | E::Diverged { .. } | E::Sampling(_) | E::Tensor(_) => EXIT_RUNTIME,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_RUNTIME
}

fn execute(command: Command) -> anyhow::Result<()> {
    let resolve = |c: &Common| ExperimentConfig::resolve(c.config.as_deref(), &c.set, c.seed);
    match command {
        Command::Generate(c) => {
            cmd_generate(&resolve(&c)?, &c.out)?;
        }
        Command::Train {
            common,
            resume,
            max_cycles,
        } => {
            cmd_train(&resolve(&common)?, &common.out, &TrainFlags { resume, max_cycles })?;
        }
        Command::Eval(c) => {
            cmd_eval(&resolve(&c)?, &c.out)?;
        }
        Command::Ablate(c) => {
            cmd_ablate(&resolve(&c)?, &c.out)?;
        }
        Command::Fit(c) => {
            cmd_fit(&resolve(&c)?, &c.out)?;
        }
        Command::Stats(c) => {
            cmd_stats(&resolve(&c)?, &c.out)?;
        }
    }
    Ok(())
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!("{e:#}");
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
