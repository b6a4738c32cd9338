//! Library behind the `repose` binary. Each subcommand is a thin wrapper over
//! `repose-core`; [`run`] parses arguments and maps failures to exit codes.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use repose_core::CoreError;

pub mod ablate;
pub mod commands;
pub mod draw;

pub use ablate::{ablate_keypoints, AblationReport, AblationRow, AblationSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(#[from] CoreError),
    #[error("training failed: {0}")]
    Training(CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Training(_) => EXIT_TRAINING,
        }
    }

    /// Errors raised while a trainer runs count as training faults.
    pub fn training(e: CoreError) -> Self {
        CliError::Training(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "repose", version, about = "Exemplar-guided object reposing on synthetic renders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a paired dataset and write its manifest.
    Datagen(DatagenArgs),
    /// Match two images and draw the correspondences.
    Match(MatchArgs),
    /// Run the three training phases on a dataset.
    Train(TrainArgs),
    /// Repose one appearance image with a trained checkpoint.
    Infer(InferArgs),
    /// Score a checkpoint against the TPS baseline.
    Eval(EvalArgs),
    /// Train and evaluate once per keypoint count.
    Ablate(AblateArgs),
}

/// Options that override fields of the training config.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML training config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Image side length in pixels.
    #[arg(long)]
    pub res: Option<usize>,
    /// Number of keypoints.
    #[arg(long)]
    pub k: Option<usize>,
    /// Zero the pose image in the warp input.
    #[arg(long)]
    pub ablate_pose_input: bool,
    /// Skip the end-to-end phase.
    #[arg(long)]
    pub skip_e2e: bool,
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated object classes.
    #[arg(long, value_delimiter = ',', default_value = "vase,briefcase,cabinet,shoe")]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = 256)]
    pub pairs: usize,
    #[arg(long, default_value_t = 64)]
    pub res: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Models per class instead of the reference counts.
    #[arg(long)]
    pub models_per_class: Option<usize>,
}

/// Where a pair of input images comes from.
#[derive(Debug, Clone, Default, Args)]
pub struct PairArgs {
    #[arg(long, requires = "pose", conflicts_with = "dataset")]
    pub appearance: Option<PathBuf>,
    #[arg(long, requires = "appearance")]
    pub pose: Option<PathBuf>,
    /// Dataset directory; use with `--index`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory; overrides the config's `dataset`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Run directory for checkpoints and logs.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the run directory's latest checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub pair: PairArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the predicted flow field.
    #[arg(long)]
    pub dump_flow: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Score only the held-out model pairs of the checkpoint's split.
    #[arg(long)]
    pub held_out: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Keypoint counts to compare.
    #[arg(long, value_delimiter = ',', default_value = "15,25,35,45")]
    pub k_list: Vec<usize>,
    /// Number of held-out samples drawn as comparison strips.
    #[arg(long, default_value_t = 4)]
    pub strips: usize,
}

/// Parses `args` (program name first) and runs the subcommand. Returns the
/// process exit code; failures are reported on stderr as one line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Datagen(a) => commands::datagen(&a).map(|_| ()),
        Command::Match(a) => commands::match_pair(&a).map(|_| ()),
        Command::Train(a) => commands::train(&a).map(|_| ()),
        Command::Infer(a) => commands::infer(&a).map(|_| ()),
        Command::Eval(a) => commands::eval(&a).map(|report| print!("{}", report.to_table())),
        Command::Ablate(a) => {
            let spec = commands::ablation_spec(&a)?;
            ablate_keypoints(&spec).map(|report| print!("{}", report.to_table()))
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
