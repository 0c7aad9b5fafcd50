//! `scene-embed`: annotations -> scene sentences -> co-occurrence shards ->
//! vectors -> queries and masking evaluation.
//!
//! Settings resolve as flag (or `SCENE_EMBED_*` variable) > `--config` file >
//! built-in default. Exit codes: 0 success, 1 usage or configuration error,
//! 2 data error, 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scene_embed::{OutputMode, ScanAxis, WeightingMode};

use crate::config::VectorFormat;

#[derive(Debug, Parser)]
#[command(
    name = "scene-embed",
    version,
    about = "Scene-based contextual object embeddings"
)]
pub struct Cli {
    /// TOML file with [preprocess], [cooccur], [train], [query], [mask_eval] or [synth] tables.
    #[arg(long, global = true, env = "SCENE_EMBED_CONFIG")]
    pub config: Option<PathBuf>,

    /// Print the resolved settings to stderr before running.
    #[arg(long, global = true)]
    pub emit_config: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn a box-annotation CSV into scene sentences and a vocabulary.
    Preprocess(PreprocessArgs),
    /// Count windowed label pairs into binary shards.
    Cooccur(CooccurArgs),
    /// Fit vectors to the co-occurrence shards.
    Train(TrainArgs),
    /// Nearest neighbors, axis projection, PCA or prompt enrichment.
    Query(QueryArgs),
    /// Leave-one-out masking accuracy.
    MaskEval(MaskEvalArgs),
    /// Generate a clustered synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Box annotations CSV with a header row.
    pub annotations: PathBuf,
    /// `code,name` CSV mapping label codes to display names.
    #[arg(long)]
    pub class_names: Option<PathBuf>,
    #[arg(long)]
    pub out_sentences: PathBuf,
    #[arg(long)]
    pub out_vocab: PathBuf,
    #[arg(long, env = "SCENE_EMBED_MIN_COUNT")]
    pub min_count: Option<u64>,
    /// horizontal or vertical.
    #[arg(long, env = "SCENE_EMBED_SCAN")]
    pub scan: Option<ScanAxis>,
    /// Report malformed rows and keep going instead of stopping.
    #[arg(long)]
    pub skip_bad_rows: bool,
    #[arg(long)]
    pub col_image_id: Option<String>,
    #[arg(long)]
    pub col_label: Option<String>,
    #[arg(long)]
    pub col_x_min: Option<String>,
    #[arg(long)]
    pub col_x_max: Option<String>,
    #[arg(long)]
    pub col_y_min: Option<String>,
    #[arg(long)]
    pub col_y_max: Option<String>,
}

#[derive(Debug, Args)]
pub struct CooccurArgs {
    /// Sentence file written by `preprocess` or `synth`.
    pub sentences: PathBuf,
    /// Directory for `shard-NNNNN.bin` files.
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary file; fixes the class count (otherwise max id + 1).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, env = "SCENE_EMBED_WINDOW")]
    pub window: Option<usize>,
    /// unit or harmonic.
    #[arg(long, env = "SCENE_EMBED_MODE")]
    pub mode: Option<WeightingMode>,
    #[arg(long, env = "SCENE_EMBED_THREADS")]
    pub threads: Option<usize>,
    #[arg(long)]
    pub records_per_shard: Option<usize>,
    /// Also write the table as `i j weight` text.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Shard directory written by `cooccur`.
    pub shards: PathBuf,
    /// Output vector file.
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary file supplying row labels (otherwise ids are used).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, env = "SCENE_EMBED_DIM")]
    pub dim: Option<usize>,
    #[arg(long, env = "SCENE_EMBED_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "SCENE_EMBED_XMAX")]
    pub xmax: Option<f64>,
    #[arg(long, env = "SCENE_EMBED_ALPHA")]
    pub alpha: Option<f64>,
    /// Initial AdaGrad step.
    #[arg(long, env = "SCENE_EMBED_ETA")]
    pub eta: Option<f64>,
    #[arg(long, env = "SCENE_EMBED_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "SCENE_EMBED_THREADS")]
    pub threads: Option<usize>,
    /// sum (main + context) or main.
    #[arg(long, env = "SCENE_EMBED_OUTPUT_MODE")]
    pub output_mode: Option<OutputMode>,
    /// text or binary.
    #[arg(long, env = "SCENE_EMBED_FORMAT")]
    pub format: Option<VectorFormat>,
    /// Save resumable state here.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Write per-epoch mean loss as `epoch<TAB>loss`.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Vector file (text or binary).
    pub vectors: PathBuf,
    /// Vocabulary file supplying label counts for `--min-count`.
    #[arg(long, global = true)]
    pub vocab: Option<PathBuf>,
    /// Output file (stdout by default).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub op: QueryOp,
}

#[derive(Debug, Subcommand)]
pub enum QueryOp {
    /// Closest labels by cosine distance (TSV: rank, label, distance).
    Knn {
        label: String,
        #[arg(long, env = "SCENE_EMBED_K")]
        k: Option<usize>,
        #[arg(long)]
        min_count: Option<u64>,
    },
    /// Coordinates along the axis from A to B (CSV: label, x).
    Project {
        a: String,
        b: String,
        /// Comma-separated labels to project (all by default).
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
    },
    /// First two principal components (CSV: label, x, y).
    Pca {
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
    },
    /// "a <label> with <n1>, <n2>, and <n3>" from the nearest neighbors.
    Enrich {
        label: String,
        #[arg(long, env = "SCENE_EMBED_K")]
        k: Option<usize>,
        #[arg(long)]
        preposition: Option<String>,
        #[arg(long)]
        no_oxford_comma: bool,
    },
}

#[derive(Debug, Args)]
pub struct MaskEvalArgs {
    /// Vector file (text or binary).
    pub vectors: PathBuf,
    /// Held-out sentence file.
    pub sentences: PathBuf,
    /// Vocabulary the sentence ids refer to; ids are remapped to vector rows by label.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', env = "SCENE_EMBED_KS")]
    pub ks: Option<Vec<usize>>,
    #[arg(long, env = "SCENE_EMBED_THREADS")]
    pub threads: Option<usize>,
    /// Per-instance `image<TAB>answer<TAB>rank` lines.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// JSON lines with accuracy per k.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_sentences: PathBuf,
    #[arg(long)]
    pub out_vocab: PathBuf,
    /// Also write `label<TAB>cluster` lines.
    #[arg(long)]
    pub out_clusters: Option<PathBuf>,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub per_cluster: Option<usize>,
    #[arg(long)]
    pub min_size: Option<usize>,
    #[arg(long)]
    pub max_size: Option<usize>,
    #[arg(long)]
    pub within_prob: Option<f64>,
    #[arg(long)]
    pub label_skew: Option<f64>,
    #[arg(long, env = "SCENE_EMBED_SEED")]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
