//! Scene-based contextual object embeddings.
//!
//! Object-detection annotations are turned into scene "sentences" (box labels
//! ordered by a horizontal or vertical scan of their centers), windowed
//! co-occurrence counts are accumulated over those sentences, and object
//! vectors are fitted to the log counts with a weighted least-squares
//! objective. The trained vectors support cosine neighbor queries, semantic
//! axis projection, 2-D PCA and a masking evaluation.
//!
//! Pipeline: [`corpus`] -> [`cooccur`] -> [`trainer`] -> [`embedding`] / [`eval`].

pub mod cooccur;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod trainer;

pub use cooccur::{accumulate, CooccurRecord, CooccurTable, WeightingMode};
pub use corpus::{
    box_center, build_vocabulary, parse_annotations, preprocess, scan_image, BoxAnnotation, BoxCenter,
    ClassNames, ColumnMap, ScanAxis, SceneSentence, Vocabulary,
};
pub use embedding::{
    cosine_similarity, enrich_prompt, nearest_neighbors, pca_2d, project_axis, EmbeddingStore, NeighborList,
    PromptTemplate,
};
pub use error::{Error, Result, RowError};
pub use eval::{
    evaluate, generate_synthetic_corpus, random_baseline, score_classes, ClusterSpec, MaskingReport,
};
pub use trainer::{finalize, train, ModelParams, OutputMode, TrainConfig, TrainReport};
