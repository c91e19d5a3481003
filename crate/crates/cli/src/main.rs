//! `jigwm`: train, embed, detect, evaluate, attack and HAV scoring from the
//! command line.

mod commands;
mod config;
mod dataset;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Jigsaw-keyed invisible watermarking.
#[derive(Parser, Debug)]
#[command(name = "jigwm", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Edit oracle: `echo`, `analytic`, `cmd:PROGRAM ARGS` or an http(s) URL.
    #[arg(long, global = true)]
    pub oracle: Option<String>,
    /// Watermark checkpoint (or HAV model for `hav`).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Jigsaw key file.
    #[arg(long, global = true)]
    pub key: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Oracle request timeout.
    #[arg(long, global = true, env = "JIGMARK_ORACLE_TIMEOUT_MS", hide_env_values = true)]
    pub oracle_timeout_ms: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train (or resume with --checkpoint) a watermark model.
    Train(TrainArgs),
    /// Draw a fresh key and write it to --key.
    Keygen(KeygenArgs),
    /// Watermark every image of a directory.
    Embed(InputArgs),
    /// Score every image of a directory under --key.
    Detect(DetectArgs),
    /// Detection reports under perturbation suites.
    Evaluate(EvaluateArgs),
    /// Watermark removal attacks and their success rate.
    Attack(AttackArgs),
    /// Human-aligned variation scorer.
    Hav {
        #[command(subcommand)]
        command: HavCommand,
    },
    /// Line-delimited JSON edit oracle applying analytic perturbations.
    #[command(hide = true)]
    OracleStub,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of training images.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSONL mapping image filenames to edit instructions.
    #[arg(long)]
    pub instructions: Option<PathBuf>,
    /// Train on this many procedurally generated images instead of --data.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Stop after this many epochs (default: the configured total).
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct KeygenArgs {
    /// Grid as ROWSxCOLS.
    #[arg(long, default_value = "4x4")]
    pub grid: String,
}

#[derive(Args, Debug)]
pub struct InputArgs {
    /// Directory of input images.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Known-clean images; when given, a detection report is written with
    /// --input as positives and these as negatives.
    #[arg(long)]
    pub negatives: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    /// No perturbation.
    Clean,
    /// The six analytic evaluation perturbations.
    Type1,
    /// Detection with keys differing by 1..=8 swapped block pairs.
    Mismatch,
    /// Per-image oracle edits from --instructions.
    Oracle,
    /// The perturbations given with --perturb.
    Custom,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Clean evaluation images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "type1")]
    pub suite: Suite,
    /// Perturbation label for the custom suite, e.g. `jpeg:70`; repeatable.
    #[arg(long = "perturb")]
    pub perturb: Vec<String>,
    #[arg(long)]
    pub instructions: Option<PathBuf>,
    /// HAV model; oracle edits outside --hav-band are dropped.
    #[arg(long)]
    pub hav: Option<PathBuf>,
    /// Inclusive band as LO:HI.
    #[arg(long, default_value = "0.3:0.5")]
    pub hav_band: String,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Pgd,
    Surrogate,
    Regeneration,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    /// Clean images to watermark and attack.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "pgd")]
    pub kind: AttackKind,
    /// HAV model used to report the mean variation of the attack.
    #[arg(long)]
    pub hav: Option<PathBuf>,
    /// Also write the attacked images.
    #[arg(long)]
    pub save_images: bool,
}

#[derive(Subcommand, Debug)]
pub enum HavCommand {
    /// Fit a scorer on ranking groups and write it to --out.
    Train(HavDataArgs),
    /// Mean footrule of a scorer (--checkpoint) on ranking groups.
    Eval(HavDataArgs),
    /// Score one original/variant pair.
    Score {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        variant: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct HavDataArgs {
    /// Ranking-group JSONL.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Use this many synthetic noise-ranked groups instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
