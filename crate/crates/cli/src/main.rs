//! `coordsync` command-line driver.
//!
//! Exit status: 0 on success, 1 on a pipeline error, 2 on a usage error.

mod commands;
mod layer;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(coordsync::Error),
}

impl From<coordsync::Error> for CliError {
    fn from(e: coordsync::Error) -> Self {
        CliError::Domain(e)
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

/// Channel-delay coordination analysis pipeline.
#[derive(Parser)]
#[command(name = "coordsync", disable_version_flag = true)]
struct Cli {
    /// JSON file with one section per command holding flag defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for segment- and fold-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut every utterance of a cohort into analysis segments.
    Segment(SegmentArgs),
    /// Time-delay embedded correlation matrices for every segment in a directory.
    Tdec(TdecArgs),
    /// Channel-delay coordination maps for every segment in a directory.
    Fvtc(FvtcArgs),
    /// Rank-ordered eigenspectra of TDEC matrix files.
    Eigen(EigenArgs),
    /// Render figures.
    #[command(subcommand)]
    Plot(PlotCommand),
    /// Generate a synthetic cohort.
    Synth(SynthArgs),
    /// Leave-one-subject-out training and evaluation.
    Train(TrainArgs),
    /// Print the evaluation table of a finished run.
    Report(ReportArgs),
    /// Search the learning-rate and batch-size grid.
    Gridsearch(TrainArgs),
    /// Finite-difference check of a model's gradients.
    Gradcheck(GradcheckArgs),
    /// Print the version.
    Version,
}

#[derive(Subcommand)]
enum PlotCommand {
    /// Per-class averaged eigenspectra and their difference curve.
    Eigenspectra(PlotArgs),
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Segment length in seconds.
    #[arg(long)]
    pub chunk: Option<f64>,
    /// Shortest kept segment in seconds.
    #[arg(long)]
    pub min: Option<f64>,
    /// Handling of non-finite cells: reject or interpolate.
    #[arg(long)]
    pub repair: Option<String>,
    /// Restrict to these modalities (comma separated, e.g. FAU,TV).
    #[arg(long, value_delimiter = ',')]
    pub modalities: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdecArgs {
    /// Directory of segment CSVs with sidecars.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Delay scales in frames (comma separated); modality default when unset.
    #[arg(long, value_delimiter = ',')]
    pub scales: Vec<usize>,
    /// Delayed copies per channel.
    #[arg(long)]
    pub delays: Option<usize>,
    #[arg(long)]
    pub min_frames: Option<usize>,
    /// Also write each matrix as CSV.
    #[arg(long)]
    pub csv: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FvtcArgs {
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Lag extent D.
    #[arg(long = "D", alias = "d")]
    pub d: Option<usize>,
    #[arg(long)]
    pub min_frames: Option<usize>,
    #[arg(long)]
    pub csv: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EigenArgs {
    /// Directory of TDEC matrix files.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotArgs {
    /// Directory of eigenspectrum CSVs written by `eigen`.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Subject labels: a cohort manifest (.json) or a `subject_id,label` CSV.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub title: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthArgs {
    #[arg(long)]
    pub preset: Option<String>,
    /// Total subject count, split evenly across classes.
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Full generator specification (JSON); the preset is ignored when set.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Model configuration JSON.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Training configuration JSON.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
    /// LOSO folds scored per grid cell (gridsearch only).
    #[arg(long)]
    pub grid_folds: Option<usize>,
    #[arg(long)]
    pub chunk: Option<f64>,
    #[arg(long)]
    pub min: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// table or json.
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Samples in the random batch.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Coordinates probed per parameter tensor.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// `COORDSYNC_SEED`, when set, replaces seeds read from config files; an
/// explicit `--seed` still wins.
pub fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var("COORDSYNC_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("COORDSYNC_SEED must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn dispatch(cli: Cli) -> CliResult {
    let file = cli.config.as_deref().map(layer::load_file).transpose()?;
    let file = file.as_ref();
    if cli.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;

    match cli.command {
        Command::Segment(a) => commands::segment(layer::merge(&a, file, "segment")?),
        Command::Tdec(a) => commands::tdec(layer::merge(&a, file, "tdec")?),
        Command::Fvtc(a) => commands::fvtc(layer::merge(&a, file, "fvtc")?),
        Command::Eigen(a) => commands::eigen(layer::merge(&a, file, "eigen")?),
        Command::Plot(PlotCommand::Eigenspectra(a)) => commands::plot_eigenspectra(layer::merge(&a, file, "plot")?),
        Command::Synth(mut a) => {
            a.seed = a.seed.or(env_seed()?);
            commands::synth(layer::merge(&a, file, "synth")?)
        }
        Command::Train(mut a) => {
            a.seed = a.seed.or(env_seed()?);
            commands::train(layer::merge(&a, file, "train")?)
        }
        Command::Report(a) => commands::report(layer::merge(&a, file, "report")?),
        Command::Gridsearch(mut a) => {
            a.seed = a.seed.or(env_seed()?);
            commands::gridsearch(layer::merge(&a, file, "gridsearch")?)
        }
        Command::Gradcheck(mut a) => {
            a.seed = a.seed.or(env_seed()?);
            commands::gradcheck(layer::merge(&a, file, "gradcheck")?)
        }
        Command::Version => {
            println!("coordsync {}", coordsync::VERSION);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            eprintln!("run `coordsync --help` for the command list");
            ExitCode::from(2)
        }
        Err(CliError::Domain(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
