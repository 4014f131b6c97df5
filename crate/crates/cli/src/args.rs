use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scene2prompt::prompt::{AblationMode, ImageEncoding};
use scene2prompt::pruning::VoteWeighting;

/// Turn 3D scans into text and multi-view image prompts for a vision-language
/// model, query an endpoint and score the answers.
///
/// Settings come from built-in defaults, then the TOML file given with
/// --config, then command-line flags. Flags always win.
///
/// Exit codes: 0 success, 1 partial failure (a scene or request failed),
/// 2 configuration or usage error.
#[derive(Debug, Parser)]
#[command(name = "scene2prompt", version)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (backoff jitter, toy model init).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of scenes processed concurrently.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a scene directory and print a summary; optionally rewrite it in canonical form.
    Ingest(IngestArgs),
    /// Suppress duplicate proposals and relabel survivors by majority vote.
    Prune(PruneArgs),
    /// Write the object description used by the prompt mode.
    Describe(DescribeArgs),
    /// Render the top-down and four oblique views as PNGs.
    Render(RenderArgs),
    /// Compute stub patch features from the renders or import a feature file.
    Features(FeaturesArgs),
    /// Hierarchical visual encoder: forward pass, toy training, gradient check.
    Hier(HierArgs),
    /// Assemble prompt bundles for the questions of one scene.
    Assemble(AssembleArgs),
    /// Send assembled bundles to a chat-completions endpoint and score the answers.
    Ask(AskArgs),
    /// Score a predictions file.
    Eval(EvalArgs),
    /// Run every stage over a directory of scenes.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    /// Scene directory holding cloud.ply, proposals.json and optionally situation.json.
    #[arg(long, value_name = "DIR")]
    pub scene: PathBuf,
    /// Drop proposals below this confidence when loading.
    #[arg(long)]
    pub min_confidence: Option<f64>,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output root; artifacts go to <OUT>/<scene_id>/.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct PruneFlags {
    /// IoU above which two proposals are treated as duplicates.
    #[arg(long)]
    pub iou: Option<f64>,
    /// How relabel votes are weighted.
    #[arg(long, value_parser = parse_vote)]
    pub vote: Option<VoteWeighting>,
}

fn parse_vote(s: &str) -> Result<VoteWeighting, String> {
    s.parse()
}

#[derive(Debug, Args, Default)]
pub struct ModeFlags {
    /// Prompt mode: MV, CT, CDT, CDT+MV, CDT+MV+HR or ZS-CDT+MV.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<AblationMode>,
}

fn parse_mode(s: &str) -> Result<AblationMode, String> {
    s.parse()
}

#[derive(Debug, Args, Default)]
pub struct DescribeFlags {
    /// Decimal places for coordinates (2 or 4).
    #[arg(long)]
    pub precision: Option<usize>,
    /// In direction mode, also append the plain coordinate list.
    #[arg(long)]
    pub append_coordinates: bool,
}

#[derive(Debug, Args, Default)]
pub struct RenderFlags {
    /// Image width in pixels.
    #[arg(long)]
    pub width: Option<u32>,
    /// Image height in pixels.
    #[arg(long)]
    pub height: Option<u32>,
    /// Splat radius in pixels.
    #[arg(long)]
    pub splat_radius: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct FeatureFlags {
    /// Patch grid side; each view yields grid*grid patches.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Patch feature width.
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct AssembleFlags {
    /// Emit four view placeholders instead of five.
    #[arg(long)]
    pub four_view_placeholders: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EncodingArg {
    File,
    Inline,
}

impl From<EncodingArg> for ImageEncoding {
    fn from(e: EncodingArg) -> Self {
        match e {
            EncodingArg::File => ImageEncoding::File,
            EncodingArg::Inline => ImageEncoding::Inline,
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct EndpointFlags {
    /// Base URL of a chat-completions endpoint, e.g. http://host:8000/v1.
    /// The API key is read from SCENE2PROMPT_API_KEY.
    #[arg(long, value_name = "URL")]
    pub endpoint: Option<String>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Retries after a timeout, transport error or 5xx response.
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Maximum requests in flight.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Response cache directory (default <OUT>/cache).
    #[arg(long, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Ignore and do not write the response cache.
    #[arg(long)]
    pub no_cache: bool,
    /// Model name sent in each request.
    #[arg(long)]
    pub model: Option<String>,
    /// Answer length limit sent in each request.
    #[arg(long)]
    pub max_tokens: Option<u32>,
    /// How images are referenced in requests.
    #[arg(long, value_enum)]
    pub image_encoding: Option<EncodingArg>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Rewrite the scene (binary PLY, normalized JSON) under <OUT>/<scene_id>/.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub prune: PruneFlags,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Proposals to describe (default <OUT>/<scene_id>/proposals_pruned.json).
    #[arg(long, value_name = "FILE")]
    pub proposals: Option<PathBuf>,
    #[command(flatten)]
    pub mode: ModeFlags,
    #[command(flatten)]
    pub describe: DescribeFlags,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub render: RenderFlags,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub render: RenderFlags,
    #[command(flatten)]
    pub features: FeatureFlags,
    /// Import precomputed features (five views) instead of computing stubs.
    #[arg(long, value_name = "FILE")]
    pub import: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HierArgs {
    #[command(subcommand)]
    pub action: HierAction,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    /// Attention heads.
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Decoder vocabulary size.
    #[arg(long, default_value_t = 16)]
    pub vocab: usize,
    /// Longest answer the decoder accepts.
    #[arg(long, default_value_t = 8)]
    pub max_len: usize,
}

#[derive(Debug, Subcommand)]
pub enum HierAction {
    /// Encode a feature file and print the view and scene tokens as JSON.
    Forward {
        /// Patch feature file (HVF1).
        #[arg(long, value_name = "FILE")]
        features: PathBuf,
        /// Load weights instead of a seeded initialization.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Memorize one answer with the toy decoder and report the loss drop.
    Train {
        /// Patch features to train on (default: random features).
        #[arg(long, value_name = "FILE")]
        features: Option<PathBuf>,
        /// Model width when no feature file is given.
        #[arg(long, default_value_t = 32)]
        dim: usize,
        /// Patches per view when no feature file is given.
        #[arg(long, default_value_t = 4)]
        patches: usize,
        /// Answer token ids, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "7,9,11")]
        answer: Vec<usize>,
        /// Gradient descent steps.
        #[arg(long, default_value_t = 500)]
        steps: usize,
        /// Learning rate.
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        /// Write the trained weights here.
        #[arg(long, value_name = "FILE")]
        save: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Compare analytic and finite-difference gradients on random instances.
    Gradcheck {
        /// Model width.
        #[arg(long, default_value_t = 8)]
        dim: usize,
        /// Patches per view.
        #[arg(long, default_value_t = 2)]
        patches: usize,
        /// Random instances to check.
        #[arg(long, default_value_t = 10)]
        instances: usize,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[command(flatten)]
        model: ModelFlags,
    },
}

#[derive(Debug, Args)]
pub struct AssembleArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Questions file (JSON lines).
    #[arg(long, value_name = "FILE")]
    pub questions: Option<PathBuf>,
    #[command(flatten)]
    pub mode: ModeFlags,
    #[command(flatten)]
    pub assemble: AssembleFlags,
}

#[derive(Debug, Args)]
pub struct AskArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// Bundle files (default: every <OUT>/*/bundles.jsonl).
    #[arg(long, value_name = "FILE")]
    pub bundles: Vec<PathBuf>,
    #[command(flatten)]
    pub endpoint: EndpointFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions file (JSON lines with scene_id, question, references, prediction).
    #[arg(long, value_name = "FILE")]
    pub predictions: PathBuf,
    /// Also write the report as JSON.
    #[arg(long, value_name = "FILE")]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Directory with one sub-directory per scene.
    #[arg(long, value_name = "DIR")]
    pub scenes: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
    /// Questions file (JSON lines).
    #[arg(long, value_name = "FILE")]
    pub questions: Option<PathBuf>,
    /// Directory of <scene_id>.hvf files to import as patch features.
    #[arg(long, value_name = "DIR")]
    pub features_dir: Option<PathBuf>,
    /// Compute stub patch features for every scene.
    #[arg(long)]
    pub stub_features: bool,
    /// Drop proposals below this confidence when loading.
    #[arg(long)]
    pub min_confidence: Option<f64>,
    #[command(flatten)]
    pub mode: ModeFlags,
    #[command(flatten)]
    pub prune: PruneFlags,
    #[command(flatten)]
    pub describe: DescribeFlags,
    #[command(flatten)]
    pub render: RenderFlags,
    #[command(flatten)]
    pub features: FeatureFlags,
    #[command(flatten)]
    pub assemble: AssembleFlags,
    #[command(flatten)]
    pub endpoint: EndpointFlags,
}
