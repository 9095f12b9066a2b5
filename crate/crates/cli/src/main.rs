//! `rekvc`: command-line entrypoint for the voice-conversion toolkit.
//!
//! Usage errors exit with 2 (clap's convention), runtime failures with 1.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "rekvc",
    version,
    about = "Residual K-Means content decoupling, kNN teacher pairs and a toy prompt-based converter"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic speaker corpus (one VTF per speaker plus a manifest)
    GenCorpus(GenCorpusArgs),
    /// Fit one K-Means codebook over the frames of the input files
    FitKmeans(FitKmeansArgs),
    /// Fit the two-stage content + residual decoupler
    FitDecoupler(FitDecouplerArgs),
    /// Encode features into the enhanced content representation
    Encode(EncodeArgs),
    /// Validate a pool manifest and store one merged file per speaker
    BuildPool(BuildPoolArgs),
    /// Render a source utterance with a pool speaker's frames
    KnnConvert(KnnConvertArgs),
    /// Fit the small, medium and large target tokenizers
    FitTokenizers(FitTokenizersArgs),
    /// Sample dual-mode training pairs and write them to disk
    MakePairs(MakePairsArgs),
    /// Train the toy converter on the synthetic task
    TrainToy(TrainToyArgs),
    /// Distortion report, codebook statistics and speaker similarity proxy
    Eval(EvalArgs),
    /// Compare converter gradients against finite differences
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    speakers: usize,
    #[arg(long, default_value_t = 500)]
    frames: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    archetypes: usize,
    #[arg(long, default_value_t = 1.0)]
    offset_scale: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
}

#[derive(Args)]
struct FitKmeansArgs {
    /// Input VTF files (repeatable); frames are pooled
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    centroids: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

#[derive(Args)]
struct FitDecouplerArgs {
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Output directory for the two codebooks and metadata
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = rekvc::decoupler::DEFAULT_CONTENT_CENTROIDS)]
    k1: usize,
    #[arg(long, default_value_t = rekvc::decoupler::DEFAULT_RESIDUAL_CENTROIDS)]
    k2: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct EncodeArgs {
    /// Decoupler directory written by fit-decoupler
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Optional TSV of per-frame content and residual ids
    #[arg(long)]
    ids: Option<PathBuf>,
}

#[derive(Args)]
struct BuildPoolArgs {
    /// Manifest of `speaker<TAB>path` lines
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = rekvc::teacher::DEFAULT_K)]
    k: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimilarityArg {
    Cosine,
    Euclidean,
}

#[derive(Args)]
struct KnnConvertArgs {
    /// Pool manifest
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    speaker: String,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = rekvc::teacher::DEFAULT_K)]
    k: usize,
    #[arg(long, value_enum, default_value_t = SimilarityArg::Cosine)]
    similarity: SimilarityArg,
}

#[derive(Args)]
struct FitTokenizersArgs {
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Codebook sizes small,medium,large (strictly increasing)
    #[arg(long, value_delimiter = ',', default_values_t = rekvc::losses::DEFAULT_VOCAB_SIZES)]
    codebooks: Vec<usize>,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct MakePairsArgs {
    /// Manifest of source utterances
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    decoupler: PathBuf,
    /// Directory written by fit-tokenizers
    #[arg(long)]
    tokenizers: PathBuf,
    /// Pool manifest; required unless --p-conversion is 0
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = rekvc::sampler::DEFAULT_P_CONVERSION)]
    p_conversion: f64,
    #[arg(long, default_value_t = rekvc::features::DEFAULT_PROMPT_SECONDS)]
    prompt_seconds: f64,
    #[arg(long, default_value_t = rekvc::sampler::DEFAULT_MIN_FRAMES)]
    min_frames: usize,
    #[arg(long, default_value_t = rekvc::teacher::DEFAULT_K)]
    k: usize,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0.0005)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = rekvc::sampler::DEFAULT_P_CONVERSION)]
    p_conversion: f64,
    /// Prompt length in frames for the desk-scale task
    #[arg(long, default_value_t = 16)]
    prompt_frames: usize,
    /// Checkpoint path (VTM1)
    #[arg(long)]
    output: Option<PathBuf>,
    /// Per-step loss log (TSV)
    #[arg(long)]
    log: Option<PathBuf>,
    /// Train without attention (ablation)
    #[arg(long)]
    no_attention: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Decoupler directory for a distortion report
    #[arg(long)]
    decoupler: Option<PathBuf>,
    /// Codebooks (VTC) to report utilization and perplexity for
    #[arg(long, num_args = 1..)]
    codebook: Vec<PathBuf>,
    /// Reference features for the speaker similarity proxy
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradConfig {
    Tiny,
    Default,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = GradConfig::Tiny)]
    config: GradConfig,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
