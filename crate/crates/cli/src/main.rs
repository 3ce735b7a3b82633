//! `voxkit` command-line tool.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

/// Error split by exit code: 1 for usage, 2 for data or model problems.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(voxkit::Error),
}

impl From<voxkit::Error> for CliError {
    fn from(e: voxkit::Error) -> Self {
        CliError::Data(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.into())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "voxkit", version, about = "Speaker identification and verification toolkit")]
#[command(after_help = config::keys_help(), arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Config file of `key=value` lines
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; 1 gives bit-reproducible runs
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed of every stochastic stage
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory; results go to standard output when absent
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Root that relative paths are resolved against
    #[arg(long, global = true, env = "VOXKIT_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded synthetic corpus (WAVs plus manifest.jsonl) under --out
    SynthData(SynthArgs),
    /// Compute per-utterance features into the --out directory
    ExtractFeatures(ExtractArgs),
    /// Train a diagonal-covariance UBM on MFCC features
    TrainUbm(TrainUbmArgs),
    /// Train the total variability matrix
    TrainIvector(TrainIvectorArgs),
    /// Train LDA plus PLDA on i-vectors
    TrainPlda(TrainPldaArgs),
    /// Train one-vs-rest linear SVMs on i-vectors
    TrainSvm(TrainSvmArgs),
    /// Train the spectrogram CNN (classification or contrastive embedding)
    TrainCnn(TrainCnnArgs),
    /// Write one vector per utterance from a CNN or an i-vector extractor
    Embed(EmbedArgs),
    /// Split a manifest into dev.jsonl and test.jsonl under --out
    Split(SplitArgs),
    /// Sample a verification trial list
    Trials(TrialsArgs),
    /// Score a trial list
    Score(ScoreArgs),
    /// Report identification accuracy
    EvalId(EvalIdArgs),
    /// Report EER and detection cost of a score file
    EvalVer(EvalVerArgs),
    /// Turn face-track streams into a manifest of speaking segments
    Curate(CurateArgs),
    /// Print corpus statistics of a manifest
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of speakers
    #[arg(long)]
    pub speakers: Option<usize>,
    /// Videos per speaker
    #[arg(long)]
    pub videos_per_speaker: Option<usize>,
    /// Utterances per video
    #[arg(long)]
    pub utterances_per_video: Option<usize>,
    /// Shortest utterance in seconds
    #[arg(long)]
    pub min_duration_s: Option<f64>,
    /// Longest utterance in seconds
    #[arg(long)]
    pub max_duration_s: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Manifest whose audio paths are relative to its own directory
    #[arg(long)]
    pub manifest: PathBuf,
    /// spectrogram or mfcc
    #[arg(long)]
    pub features: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainUbmArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of MFCC feature files
    #[arg(long)]
    pub feature_dir: PathBuf,
    /// Mixture components
    #[arg(long)]
    pub ubm_components: Option<usize>,
    /// EM iterations
    #[arg(long)]
    pub ubm_iters: Option<usize>,
    /// Frames drawn for k-means++ seeding
    #[arg(long)]
    pub ubm_init_subsample: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainIvectorArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of MFCC feature files
    #[arg(long)]
    pub feature_dir: PathBuf,
    /// UBM file
    #[arg(long)]
    pub ubm: PathBuf,
    /// i-vector dimension
    #[arg(long)]
    pub tv_rank: Option<usize>,
    /// EM iterations
    #[arg(long)]
    pub tv_iters: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainPldaArgs {
    /// Manifest giving the speaker of every vector
    #[arg(long)]
    pub manifest: PathBuf,
    /// i-vector file written by `embed`
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Discriminant dimension kept before PLDA
    #[arg(long)]
    pub plda_dim: Option<usize>,
    /// Two-covariance EM iterations
    #[arg(long)]
    pub plda_iters: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainSvmArgs {
    /// Manifest giving the speaker of every training vector
    #[arg(long)]
    pub manifest: PathBuf,
    /// i-vector file written by `embed`
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Validation manifest for choosing C; the training set when absent
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    /// Comma-separated C values
    #[arg(long)]
    pub svm_c_grid: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainCnnArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of spectrogram feature files
    #[arg(long)]
    pub feature_dir: PathBuf,
    /// softmax or contrastive
    #[arg(long)]
    pub objective: Option<String>,
    /// Trained classifier to start contrastive training from
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// full or compact
    #[arg(long)]
    pub cnn_size: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub siamese_epochs: Option<usize>,
    #[arg(long)]
    pub siamese_steps: Option<usize>,
    #[arg(long)]
    pub batch_pairs: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub crops_per_utt: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of feature files
    #[arg(long)]
    pub feature_dir: PathBuf,
    /// CNN checkpoint
    #[arg(long, conflicts_with = "tv")]
    pub model: Option<PathBuf>,
    /// Total variability matrix (needs --ubm)
    #[arg(long, requires = "ubm")]
    pub tv: Option<PathBuf>,
    /// UBM file
    #[arg(long)]
    pub ubm: Option<PathBuf>,
    /// embedding (normalized network output) or fc7 (penultimate activations)
    #[arg(long)]
    pub embedding: Option<String>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// identification or verification
    #[arg(long)]
    pub protocol: String,
}

#[derive(Args, Debug)]
pub struct TrialsArgs {
    /// Test manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// Target trials per speaker
    #[arg(long)]
    pub trials_pos: Option<usize>,
    /// Non-target trials per speaker
    #[arg(long)]
    pub trials_neg: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Trial list
    #[arg(long)]
    pub trials: PathBuf,
    /// cosine, plda or gmm
    #[arg(long)]
    pub backend: Option<String>,
    /// Vector file for the cosine and plda backends
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// PLDA model for the plda backend
    #[arg(long)]
    pub plda: Option<PathBuf>,
    /// UBM for the gmm backend
    #[arg(long)]
    pub ubm: Option<PathBuf>,
    /// MFCC directory for the gmm backend
    #[arg(long)]
    pub feature_dir: Option<PathBuf>,
    #[arg(long)]
    pub map_relevance: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalIdArgs {
    /// Test manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// CNN classifier checkpoint (needs --feature-dir)
    #[arg(long, conflicts_with = "svm")]
    pub model: Option<PathBuf>,
    /// Spectrogram directory
    #[arg(long)]
    pub feature_dir: Option<PathBuf>,
    /// SVM model (needs --embeddings)
    #[arg(long, requires = "embeddings")]
    pub svm: Option<PathBuf>,
    /// i-vector file
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// avgpool or segments
    #[arg(long)]
    pub inference: Option<String>,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalVerArgs {
    /// Score file
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub p_tar: Option<f64>,
    #[arg(long)]
    pub c_miss: Option<f64>,
    #[arg(long)]
    pub c_fa: Option<f64>,
}

#[derive(Args, Debug)]
pub struct CurateArgs {
    /// JSONL listing of stream metadata with frames_path entries
    #[arg(long)]
    pub streams: PathBuf,
    #[arg(long)]
    pub shot_threshold: Option<f64>,
    #[arg(long)]
    pub iou_min: Option<f64>,
    #[arg(long)]
    pub gap_max: Option<u64>,
    #[arg(long)]
    pub sync_window: Option<usize>,
    #[arg(long)]
    pub sync_threshold: Option<f64>,
    #[arg(long)]
    pub identity_threshold: Option<f64>,
    #[arg(long)]
    pub require_landmarks: Option<bool>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("voxkit: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(1),
                CliError::Data(_) => ExitCode::from(2),
            }
        }
    }
}
