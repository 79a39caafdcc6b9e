//! Command-line arguments.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "fmini", version, about = "Synthesize, curate, train and evaluate a small two-tower image-text model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled synthetic image-text corpus.
    Synth(SynthArgs),
    /// Deduplicate, filter, label and augment a raw corpus.
    Curate(CurateArgs),
    /// Two-stage contrastive training.
    Train(TrainArgs),
    /// Transfer evaluation of a trained model.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Inflate the image tower into a video tower.
    Inflate(InflateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 128)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub side: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of records given a record-unique caption.
    #[arg(long, default_value_t = 0.0)]
    pub unique_caption_fraction: f64,
    #[arg(long, default_value = "img")]
    pub id_prefix: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    /// Raw records, one JSON object per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Directory image paths are relative to; defaults to the input's directory.
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub min_side: Option<usize>,
    #[arg(long)]
    pub dedup_threshold: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Curated triplets written by `curate`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub chunk_size: Option<usize>,
    #[arg(long)]
    pub zero_workers: Option<usize>,
    /// `full` or `half-emulated`.
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub stage1_steps: Option<u64>,
    #[arg(long)]
    pub stage2_steps: Option<u64>,
    #[arg(long)]
    pub high_res_steps: Option<u64>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model checkpoint directory, e.g. `<train out>/final`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Prompt-ensembled zero-shot classification.
    ZeroShot(ZeroShotArgs),
    /// Image-text retrieval recall in both directions.
    Retrieval(RetrievalArgs),
    /// Linear probe on frozen image features.
    LinearProbe(LinearProbeArgs),
    /// Episodic few-shot adaptation.
    FewShot(FewShotArgs),
    /// Zero-shot classification of boxes on one image.
    Regions(RegionsArgs),
}

#[derive(Debug, Args)]
pub struct ZeroShotArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Labelled images, one `{"image", "label"}` object per line.
    #[arg(long)]
    pub data: PathBuf,
    /// Class names, one per line, in label order.
    #[arg(long)]
    pub classes: PathBuf,
    /// Prompt templates, one per line, `{}` marking the class name.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    pub ks: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Image-text pairs, one `{"image", "text"}` object per line.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub ks: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct LinearProbeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FewShotArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub way: Option<usize>,
    /// One or more shot counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub shot: Option<Vec<usize>>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RegionsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    /// Boxes, one `{"x0", "y0", "x1", "y1"}` object per line.
    #[arg(long)]
    pub boxes: PathBuf,
    #[arg(long)]
    pub classes: PathBuf,
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct InflateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub temporal_kernel: usize,
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    #[arg(long)]
    pub out: PathBuf,
}
