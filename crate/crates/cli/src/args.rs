use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "dove", version, about = "Dynamic-length visual tokenizer: corpus, training, inference and analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene corpus manifest, optionally with PNG files
    GenCorpus(GenCorpus),
    /// Train the VQ codec (stage 1)
    PretrainCodec(Train),
    /// Train the dynamic token generator (stage 2), pretraining the codec first unless --init is given
    Train(Train),
    /// Fine-tune a trained tokenizer on text queries (stage 3)
    TrainQ(Train),
    /// Print the token record of one image as JSON
    Encode(Encode),
    /// Write a grid of reconstructions at increasing token budgets
    Reconstruct(Reconstruct),
    /// Score reconstruction quality at fixed token budgets
    Sweep(Sweep),
    /// Train a linear (or one-hidden-layer) probe on pooled generator features
    Probe(Probe),
    /// Render the top three principal components of per-position features as RGB
    Pca(Pca),
    /// Histogram of predicted token lengths
    AnalyzeLength(Dataset),
    /// Correlate image complexity with predicted token length
    Correlate(Dataset),
    /// Compare analytic and finite-difference gradients on seeded fixtures
    GradCheck(GradCheck),
    /// Print a checkpoint's metadata as JSON
    InspectCkpt(Inspect),
}

#[derive(Args, Debug, Clone)]
pub struct Out {
    /// Directory receiving all artifacts and the run manifest
    #[arg(long, env = "DOVE_OUT", hide_env_values = true, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct Workers {
    /// Worker threads for data-parallel work (0 uses every core, 1 runs sequentially)
    #[arg(long, default_value_t = 0, value_name = "N")]
    pub workers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full desk-scale configuration
    Default,
    /// Tiny model and a few steps per stage, for quick checks
    Smoke,
}

#[derive(Args, Debug, Clone)]
pub struct Config {
    /// JSON training configuration; fields left out keep their preset values
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration to start from
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    /// Override one configuration field by dotted key, e.g. model.dygen.gate=0.6 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CorpusKind {
    /// Multi-object scenes from the configured generator; label = object count
    Scenes,
    /// Single-object scenes over four shapes; label = shape
    Shapes,
}

#[derive(Args, Debug)]
pub struct GenCorpus {
    /// Base seed of the corpus
    #[arg(long)]
    pub seed: u64,
    /// Number of images
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// Split the entry seeds are derived for
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    /// Scene family to generate
    #[arg(long, value_enum, default_value_t = CorpusKind::Scenes)]
    pub kind: CorpusKind,
    /// Also render every image to images/NNNNNN.png
    #[arg(long)]
    pub png: bool,
    #[command(flatten)]
    pub config: Config,
    #[command(flatten)]
    pub out: Out,
    #[command(flatten)]
    pub workers: Workers,
}

#[derive(Args, Debug)]
pub struct Train {
    /// Training seed; must match the seed stored in --init or --resume checkpoints
    #[arg(long)]
    pub seed: u64,
    /// Checkpoint of the previous stage to start from
    #[arg(long, value_name = "CKPT", conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    /// Mid-stage checkpoint to continue from
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub config: Config,
    #[command(flatten)]
    pub out: Out,
    #[command(flatten)]
    pub workers: Workers,
}

#[derive(Args, Debug)]
pub struct Encode {
    /// Checkpoint to load
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    /// PNG or PPM image matching the model's input size
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    /// Query words, e.g. "red circle"; "null" for unconditioned tokens
    #[arg(long, default_value = "null")]
    pub query: String,
    /// Also write tokens.json and a run manifest here
    #[arg(long, env = "DOVE_OUT", hide_env_values = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Reconstruct {
    /// Checkpoint to load
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    /// PNG or PPM image matching the model's input size
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    /// Token budgets, one grid column each, left to right in increasing order
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    pub budgets: Vec<usize>,
    /// Query words, e.g. "red circle"; "null" for unconditioned tokens
    #[arg(long, default_value = "null")]
    pub query: String,
    #[command(flatten)]
    pub out: Out,
}

#[derive(Args, Debug)]
pub struct Source {
    /// Seed of the generated held-out images
    #[arg(long, required_unless_present = "manifest")]
    pub seed: Option<u64>,
    /// Number of generated held-out images
    #[arg(long, default_value_t = 256)]
    pub count: usize,
    /// Dataset manifest to read images from instead of generating them
    #[arg(long, value_name = "PATH", conflicts_with_all = ["seed", "count"])]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Dataset {
    /// Checkpoint to load
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub source: Source,
    /// Query words, e.g. "red circle"; "null" for unconditioned tokens
    #[arg(long, default_value = "null")]
    pub query: String,
    #[command(flatten)]
    pub out: Out,
    #[command(flatten)]
    pub workers: Workers,
}

#[derive(Args, Debug)]
pub struct Sweep {
    #[command(flatten)]
    pub data: Dataset,
    /// Token budgets to score
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    pub budgets: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    Mean,
    Max,
}

#[derive(Args, Debug)]
pub struct Probe {
    /// Checkpoint to load
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    /// Seed of the probe corpus and of the classifier initialization
    #[arg(long)]
    pub seed: u64,
    /// Generated training images
    #[arg(long, default_value_t = 1024)]
    pub train: usize,
    /// Generated validation images
    #[arg(long, default_value_t = 1024)]
    pub val: usize,
    /// Labelled training manifest instead of the generated shape corpus
    #[arg(long, value_name = "PATH", requires = "val_manifest")]
    pub train_manifest: Option<PathBuf>,
    /// Labelled validation manifest
    #[arg(long, value_name = "PATH", requires = "train_manifest")]
    pub val_manifest: Option<PathBuf>,
    /// How slot features are pooled into one vector
    #[arg(long, value_enum, default_value_t = PoolingArg::Mean)]
    pub pooling: PoolingArg,
    /// Generator block whose output is pooled; negative counts from the last
    #[arg(long, default_value_t = -1, allow_hyphen_values = true)]
    pub layer: isize,
    /// Hidden width of an MLP probe; omit for a linear probe
    #[arg(long, value_name = "WIDTH")]
    pub hidden: Option<usize>,
    /// Full-batch training epochs of the probe
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Query words, e.g. "red circle"; "null" for unconditioned tokens
    #[arg(long, default_value = "null")]
    pub query: String,
    #[command(flatten)]
    pub out: Out,
    #[command(flatten)]
    pub workers: Workers,
}

#[derive(Args, Debug)]
pub struct Pca {
    /// Checkpoint to load
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    /// PNG or PPM image matching the model's input size
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    /// Feature source: "decoder-grid" or "layer:N" for generator block N
    #[arg(long, default_value = "decoder-grid")]
    pub source: String,
    /// Query words, e.g. "red circle"; "null" for unconditioned tokens
    #[arg(long, default_value = "null")]
    pub query: String,
    #[command(flatten)]
    pub out: Out,
}

#[derive(Args, Debug)]
pub struct GradCheck {
    /// First fixture seed
    #[arg(long)]
    pub seed: u64,
    /// Number of consecutive fixture seeds
    #[arg(long, default_value_t = 20)]
    pub fixtures: u64,
    /// Coordinates checked per parameter tensor of the composite loss (all when omitted)
    #[arg(long, value_name = "N")]
    pub coords: Option<usize>,
    #[command(flatten)]
    pub out: Out,
}

#[derive(Args, Debug)]
pub struct Inspect {
    /// Checkpoint to load
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
}
