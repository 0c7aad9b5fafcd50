//! Resolved run settings. Each subcommand reads its table from an optional
//! TOML file, then command-line flags (or their `SCENE_EMBED_*` variables)
//! override individual keys.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use scene_embed::corpus::ColumnMap;
use scene_embed::{Error, OutputMode, Result, ScanAxis, TrainConfig, WeightingMode};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

mod text {
    use super::*;

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> std::result::Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VectorFormat {
    #[default]
    Text,
    Binary,
}

impl FromStr for VectorFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "txt" => Ok(VectorFormat::Text),
            "binary" | "bin" => Ok(VectorFormat::Binary),
            other => Err(Error::Config(format!("unknown vector format {other:?}"))),
        }
    }
}

impl Display for VectorFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VectorFormat::Text => "text",
            VectorFormat::Binary => "binary",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSettings {
    pub min_count: u64,
    #[serde(with = "text")]
    pub scan: ScanAxis,
    pub skip_bad_rows: bool,
    pub col_image_id: String,
    pub col_label: String,
    pub col_x_min: String,
    pub col_x_max: String,
    pub col_y_min: String,
    pub col_y_max: String,
}

impl Default for PreprocessSettings {
    fn default() -> Self {
        let c = ColumnMap::default();
        PreprocessSettings {
            min_count: 10,
            scan: ScanAxis::Horizontal,
            skip_bad_rows: false,
            col_image_id: c.image_id,
            col_label: c.label,
            col_x_min: c.x_min,
            col_x_max: c.x_max,
            col_y_min: c.y_min,
            col_y_max: c.y_max,
        }
    }
}

impl PreprocessSettings {
    pub fn columns(&self) -> ColumnMap {
        ColumnMap {
            image_id: self.col_image_id.clone(),
            label: self.col_label.clone(),
            x_min: self.col_x_min.clone(),
            x_max: self.col_x_max.clone(),
            y_min: self.col_y_min.clone(),
            y_max: self.col_y_max.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CooccurSettings {
    pub window: usize,
    #[serde(with = "text")]
    pub mode: WeightingMode,
    pub threads: usize,
    pub records_per_shard: usize,
}

impl Default for CooccurSettings {
    fn default() -> Self {
        CooccurSettings {
            window: 10,
            mode: WeightingMode::Unit,
            threads: 1,
            records_per_shard: 1 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub dim: usize,
    pub epochs: usize,
    pub x_max: f64,
    pub alpha: f64,
    pub eta: f64,
    pub seed: u64,
    pub threads: usize,
    #[serde(with = "text")]
    pub output_mode: OutputMode,
    #[serde(with = "text")]
    pub format: VectorFormat,
    /// Checkpoint period in epochs; the last epoch is always saved.
    pub checkpoint_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            dim: t.dim,
            epochs: t.epochs,
            x_max: t.x_max,
            alpha: t.alpha,
            eta: t.initial_step,
            seed: t.seed,
            threads: t.threads,
            output_mode: t.output_mode,
            format: VectorFormat::Text,
            checkpoint_every: 5,
        }
    }
}

impl TrainSettings {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            dim: self.dim,
            x_max: self.x_max,
            alpha: self.alpha,
            initial_step: self.eta,
            epochs: self.epochs,
            seed: self.seed,
            output_mode: self.output_mode,
            threads: self.threads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuerySettings {
    pub k: usize,
    pub min_count: Option<u64>,
    pub preposition: String,
    pub oxford_comma: bool,
}

impl Default for QuerySettings {
    fn default() -> Self {
        QuerySettings {
            k: 10,
            min_count: None,
            preposition: "with".into(),
            oxford_comma: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskEvalSettings {
    pub ks: Vec<usize>,
    pub threads: usize,
}

impl Default for MaskEvalSettings {
    fn default() -> Self {
        MaskEvalSettings {
            ks: vec![1, 5, 10],
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub scenes: usize,
    pub clusters: usize,
    pub per_cluster: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub within_prob: f64,
    pub label_skew: f64,
    pub seed: u64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let spec = scene_embed::ClusterSpec::uniform(3, 5);
        SynthSettings {
            scenes: 10_000,
            clusters: 3,
            per_cluster: 5,
            min_size: spec.scene_size.0,
            max_size: spec.scene_size.1,
            within_prob: spec.within_prob,
            label_skew: spec.label_skew,
            seed: 0,
        }
    }
}

/// Contents of a `--config` file: one optional table per subcommand.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub preprocess: PreprocessSettings,
    pub cooccur: CooccurSettings,
    pub train: TrainSettings,
    pub query: QuerySettings,
    pub mask_eval: MaskEvalSettings,
    pub synth: SynthSettings,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }
}

/// Renders one resolved table, e.g. `[train]` followed by its keys.
pub fn emit<T: Serialize>(section: &str, settings: &T) -> String {
    let body = toml::to_string(settings).expect("settings serialize to TOML");
    format!("[{section}]\n{body}")
}
