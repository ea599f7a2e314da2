use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "monitorvlm", version, about = "Safety-clause monitoring for construction site video")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Layered configuration file (.toml or .json)
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Clause registry JSON; the bundled registry when unset
    #[arg(long, global = true, value_name = "PATH")]
    pub registry: Option<PathBuf>,
    /// Seed for every random choice
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Root for default outputs and server state
    #[arg(long, global = true, value_name = "PATH")]
    pub data_dir: Option<PathBuf>,
    /// Print summaries and errors as JSON
    #[arg(long, global = true)]
    pub json: bool,
}

impl GlobalArgs {
    pub fn overrides(&self) -> Overrides {
        let mut o = Overrides::default();
        o.set_opt("registry", self.registry.as_ref());
        o.set_opt("seed", self.seed);
        o.set_opt("data_dir", self.data_dir.as_ref());
        o
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a video and write frames plus a triplet manifest
    Ingest(IngestArgs),
    /// Write flipped, darkened or masked copies of VQA records
    Augment(AugmentArgs),
    /// Append detector output blocks to VQA record prompts
    Annotate(AnnotateArgs),
    /// Emit clause filter training pairs from VQA records
    BuildPairs(BuildPairsArgs),
    /// Train the clause filter and write weights plus a loss history
    TrainFilter(TrainFilterArgs),
    /// Coverage of labeled violations within the filter's top K
    EvalFilter(EvalFilterArgs),
    /// Analyze one video and print its violation report
    Analyze(AnalyzeArgs),
    /// Precision, recall and F1 from predictions and ground truth
    Evaluate(EvaluateArgs),
    /// Mean latency with and without the clause filter per registry size
    SweepLatency(SweepArgs),
    /// Run the HTTP API
    Serve(ServeArgs),
}

impl Command {
    /// Flags that override keys of the layered configuration.
    pub fn overrides(&self, o: &mut Overrides) {
        match self {
            Command::Ingest(a) => {
                o.set_opt("pipeline.target_fps", a.fps);
                o.set_opt("pipeline.stride", a.stride);
            }
            Command::Annotate(a) => o.set_opt("pipeline.backends.detector", a.detector.as_ref()),
            Command::TrainFilter(a) => {
                o.set_opt("train.epochs", a.epochs);
                o.set_opt("train.lr", a.lr);
                o.set_opt("train.batch", a.batch);
            }
            Command::EvalFilter(a) => o.set_opt("pipeline.filter_weights", a.weights.as_ref()),
            Command::Analyze(a) => {
                o.set_opt("pipeline.top_k", a.top_k);
                o.set_opt("pipeline.filter_weights", a.weights.as_ref());
                o.set_opt("pipeline.backends.vlm", a.vlm.as_ref());
                o.set_opt("pipeline.backends.detector", a.detector.as_ref());
            }
            Command::SweepLatency(a) => {
                o.set_opt("pipeline.top_k", a.top_k);
                o.set_opt("pipeline.filter_weights", a.weights.as_ref());
                o.set_opt("pipeline.backends.mock_cost.base_s", a.base_s);
                o.set_opt("pipeline.backends.mock_cost.per_char_s", a.per_char_s);
            }
            Command::Serve(a) => {
                o.set_opt("server.bind", a.bind);
                o.set_opt("server.max_upload_bytes", a.max_upload_bytes);
                o.set_opt("server.auth_token", a.auth_token.as_ref());
                o.set_opt("server.max_jobs", a.max_jobs);
                if !a.cors_origin.is_empty() {
                    o.set("server.cors_origins", &a.cors_origin);
                }
            }
            Command::Augment(_) | Command::BuildPairs(_) | Command::Evaluate(_) => {}
        }
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Input video
    #[arg(long, value_name = "PATH")]
    pub video: PathBuf,
    /// Output directory [default: <data-dir>/frames]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Identifier used in frame paths and triplet ids [default: file stem]
    #[arg(long)]
    pub video_id: Option<String>,
    /// Sampling rate in frames per second
    #[arg(long)]
    pub fps: Option<f64>,
    /// Sampled frames between triplet starts
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AugmentChoice {
    Flip,
    Lowlight,
    Mask,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// VQA records (JSONL)
    #[arg(long, value_name = "PATH")]
    pub records: PathBuf,
    /// Directory record image paths are relative to [default: the records' directory]
    #[arg(long, value_name = "DIR")]
    pub images: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: AugmentChoice,
    /// Brightness factor; drawn from the seed when unset
    #[arg(long)]
    pub lowlight_factor: Option<f64>,
    /// Masked area fraction; drawn from the seed when unset
    #[arg(long)]
    pub mask_fraction: Option<f64>,
    /// Directory for augmented images [default: <data-dir>/augmented]
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Augmented records [default: <out-dir>/records.jsonl]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    /// VQA records (JSONL)
    #[arg(long, value_name = "PATH")]
    pub records: PathBuf,
    /// Directory record image paths are relative to [default: the records' directory]
    #[arg(long, value_name = "DIR")]
    pub images: Option<PathBuf>,
    /// Detector endpoint: a URL or stub:<detections.jsonl>
    #[arg(long, value_name = "ENDPOINT")]
    pub detector: Option<String>,
    /// Annotated records
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelerChoice {
    /// Labels from the records' violated clause lists
    Truth,
    /// Relevance judged by the configured VLM
    Vlm,
}

#[derive(Debug, Args)]
pub struct BuildPairsArgs {
    /// VQA records (JSONL)
    #[arg(long, value_name = "PATH")]
    pub records: PathBuf,
    /// Pairs output (JSONL)
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = LabelerChoice::Truth)]
    pub labeler: LabelerChoice,
    /// Directory record image paths are relative to [default: the records' directory]
    #[arg(long, value_name = "DIR")]
    pub images: Option<PathBuf>,
    /// Treat clauses missing from a record as negatives instead of failing
    #[arg(long)]
    pub missing_negative: bool,
}

#[derive(Debug, Args)]
pub struct TrainFilterArgs {
    /// Training pairs (JSONL)
    #[arg(long, value_name = "PATH")]
    pub pairs: PathBuf,
    /// Directory pair image paths are relative to [default: the pairs' directory]
    #[arg(long, value_name = "DIR")]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Weight file [default: <data-dir>/cf_weights.json]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Per-epoch loss CSV [default: <out>.loss.csv]
    #[arg(long, value_name = "PATH")]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalFilterArgs {
    /// VQA records whose key frames and violated clauses are scored
    #[arg(long, value_name = "PATH")]
    pub records: PathBuf,
    /// Directory record image paths are relative to [default: the records' directory]
    #[arg(long, value_name = "DIR")]
    pub images: Option<PathBuf>,
    /// Filter weights [default: pipeline.filter_weights]
    #[arg(long, value_name = "PATH")]
    pub weights: Option<PathBuf>,
    /// Comma separated K values
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,10,15,20")]
    pub k: Vec<usize>,
    /// Write the table here instead of stdout
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, value_name = "PATH")]
    pub video: PathBuf,
    /// Clauses offered to the VLM per window
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Filter weights
    #[arg(long, value_name = "PATH")]
    pub weights: Option<PathBuf>,
    /// VLM endpoint: a URL or stub:<script.jsonl>
    #[arg(long, value_name = "ENDPOINT")]
    pub vlm: Option<String>,
    /// Detector endpoint: a URL or stub:<detections.jsonl>
    #[arg(long, value_name = "ENDPOINT")]
    pub detector: Option<String>,
    /// Report id [default: file stem]
    #[arg(long)]
    pub video_id: Option<String>,
    /// Write the report here instead of stdout
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predicted clause ids, one `{"predicted": [..]}` per line
    #[arg(long, value_name = "PATH", requires = "truth", conflicts_with = "input")]
    pub pred: Option<PathBuf>,
    /// Labeled clause ids, one `{"truth": [..]}` per line
    #[arg(long, value_name = "PATH", requires = "pred")]
    pub truth: Option<PathBuf>,
    /// Combined `{"predicted": [..], "truth": [..]}` lines
    #[arg(long, value_name = "PATH", required_unless_present = "pred")]
    pub input: Option<PathBuf>,
    /// Write the metrics here instead of stdout
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma separated registry sizes
    #[arg(long, value_delimiter = ',', default_value = "40,100,200,400")]
    pub counts: Vec<usize>,
    /// Clauses kept by the filter
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Filter weights; a seeded untrained filter when unset
    #[arg(long, value_name = "PATH")]
    pub weights: Option<PathBuf>,
    /// Length of the synthetic video at one frame per second
    #[arg(long, default_value_t = 10)]
    pub seconds: usize,
    /// Fixed seconds per VLM request
    #[arg(long)]
    pub base_s: Option<f64>,
    /// Seconds per prompt character
    #[arg(long)]
    pub per_char_s: Option<f64>,
    /// Write the CSV here instead of stdout
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, value_name = "ADDR")]
    pub bind: Option<SocketAddr>,
    #[arg(long, value_name = "BYTES")]
    pub max_upload_bytes: Option<u64>,
    /// Bearer token required on API routes
    #[arg(long)]
    pub auth_token: Option<String>,
    /// Jobs processed at the same time
    #[arg(long)]
    pub max_jobs: Option<usize>,
    /// Allowed browser origin; repeatable
    #[arg(long, value_name = "ORIGIN")]
    pub cors_origin: Vec<String>,
}
