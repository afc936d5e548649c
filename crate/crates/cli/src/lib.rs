//! Command line front end: dataset generation, training, sampling,
//! evaluation and speed benchmarking.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod captioner;
pub mod commands;
pub mod config;

pub use captioner::Captioner;
pub use config::RunConfig;

/// Bad flags, config keys or missing inputs. Maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.downcast_ref::<UsageError>().is_some()) {
        EXIT_USAGE
    } else {
        EXIT_RUNTIME
    }
}

#[derive(Debug, Parser)]
#[command(name = "diffcap", version, about = "Diffusion audio captioning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand that reads a run configuration.
#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// `key=value` run configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable. Applied after `--config`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus (wavs plus manifests).
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; overrides `data_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a generated corpus.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint directory; overrides `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        /// Continue from a checkpoint; model and training settings come from it.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total optimizer steps.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Caption wav files.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Manifest whose wav column is captioned after any positional files.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        num_samples: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        stride: Option<usize>,
        wavs: Vec<PathBuf>,
    },
    /// Score hypotheses against references.
    Eval {
        /// One hypothesis per line (extra tab-separated samples are ignored).
        #[arg(long, requires = "refs", conflicts_with = "corpus")]
        hyp: Option<PathBuf>,
        /// Tab-separated references, one line per hypothesis.
        #[arg(long, requires = "hyp")]
        refs: Option<PathBuf>,
        /// Combined `hypothesis<TAB>reference[<TAB>reference...]` lines.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Measure captioning throughput.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            let _ = e.print();
            anyhow::Error::new(commands::Handled)
        }
        _ => UsageError(e.render().to_string()).into(),
    })?;
    commands::run(cli.command)
}
