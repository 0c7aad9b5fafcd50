//! In-browser demo. A clustered synthetic corpus is generated, counted and
//! trained entirely in WebAssembly; the page then asks for a PCA scatter, an
//! axis projection or a neighbor list, each returned as a JSON string.
//!
//! [`Demo`] holds the logic and runs natively; [`WebModel`] is the thin
//! `wasm-bindgen` wrapper the page calls.

use scene_embed::embedding::{self, EmbeddingStore, PromptTemplate};
use scene_embed::{accumulate, eval, trainer, ClusterSpec, TrainConfig, WeightingMode};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoParams {
    pub scenes: usize,
    pub clusters: usize,
    pub per_cluster: usize,
    pub dim: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DemoParams {
    fn default() -> Self {
        DemoParams {
            scenes: 10_000,
            clusters: 3,
            per_cluster: 5,
            dim: 50,
            epochs: 50,
            seed: 1,
        }
    }
}

impl DemoParams {
    fn check(&self) -> Result<(), String> {
        if self.scenes == 0 || self.scenes > 200_000 {
            return Err("scenes must lie in 1..=200000".into());
        }
        if self.clusters == 0 || self.per_cluster == 0 || self.clusters * self.per_cluster > 200 {
            return Err("need at least one cluster, one label each, and at most 200 labels".into());
        }
        if self.dim == 0 || self.dim > 128 || self.epochs == 0 || self.epochs > 500 {
            return Err("dim must lie in 1..=128 and epochs in 1..=500".into());
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Point<'a> {
    label: &'a str,
    cluster: usize,
    x: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    y: Option<f64>,
}

#[derive(Serialize)]
struct Summary<'a> {
    labels: &'a [String],
    clusters: &'a [usize],
    losses: &'a [f64],
}

#[derive(Serialize)]
struct PcaOut<'a> {
    points: Vec<Point<'a>>,
    eigenvalues: [f64; 2],
}

#[derive(Serialize)]
struct NeighborOut {
    label: String,
    cluster: usize,
    distance: f64,
}

#[derive(Serialize)]
struct KnnOut {
    query: String,
    neighbors: Vec<NeighborOut>,
    prompt: String,
}

/// A trained synthetic model plus the cluster each label was drawn from.
#[derive(Debug, Clone)]
pub struct Demo {
    store: EmbeddingStore,
    clusters: Vec<usize>,
    losses: Vec<f64>,
}

impl Demo {
    pub fn train(p: DemoParams) -> Result<Demo, String> {
        p.check()?;
        let spec = ClusterSpec::uniform(p.clusters, p.per_cluster);
        let corpus = eval::generate_synthetic_corpus(p.scenes, &spec, p.seed).map_err(|e| e.to_string())?;
        let v = corpus.vocab.len();
        let table =
            accumulate(&corpus.sentences, v, WINDOW, WeightingMode::Unit, 1).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            dim: p.dim,
            epochs: p.epochs,
            seed: p.seed,
            ..TrainConfig::default()
        };
        let (params, report) = trainer::train(&table, &cfg).map_err(|e| e.to_string())?;
        let labels = corpus.vocab.labels().to_vec();
        let clusters = labels.iter().map(|l| corpus.cluster_of[l]).collect();
        let store = EmbeddingStore::new(labels, cfg.dim, trainer::finalize(&params, cfg.output_mode))
            .map_err(|e| e.to_string())?;
        Ok(Demo {
            store,
            clusters,
            losses: report.epoch_losses,
        })
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    fn cluster(&self, label: &str) -> usize {
        self.store.lookup(label).map_or(0, |k| self.clusters[k])
    }

    /// `{"labels": [...], "clusters": [...], "losses": [...]}`.
    pub fn summary_json(&self) -> String {
        serde_json::to_string(&Summary {
            labels: self.store.labels(),
            clusters: &self.clusters,
            losses: &self.losses,
        })
        .expect("summary serializes")
    }

    /// `{"points": [{label, cluster, x, y}], "eigenvalues": [l1, l2]}`.
    pub fn pca_json(&self) -> Result<String, String> {
        let p = embedding::pca_2d(&self.store, &[]).map_err(|e| e.to_string())?;
        let points = p
            .points
            .iter()
            .zip(&self.clusters)
            .map(|((label, x, y), &cluster)| Point {
                label,
                cluster,
                x: *x,
                y: Some(*y),
            })
            .collect();
        Ok(serde_json::to_string(&PcaOut {
            points,
            eigenvalues: p.eigenvalues,
        })
        .expect("pca serializes"))
    }

    /// `[{label, cluster, x}]` sorted along the axis from `a` to `b`.
    pub fn project_json(&self, a: &str, b: &str) -> Result<String, String> {
        let p = embedding::project_axis(&self.store, a, b, &[]).map_err(|e| e.to_string())?;
        let sorted = p.sorted();
        let points: Vec<Point> = sorted
            .iter()
            .map(|(label, x)| Point {
                label,
                cluster: self.cluster(label),
                x: *x,
                y: None,
            })
            .collect();
        Ok(serde_json::to_string(&points).expect("projection serializes"))
    }

    /// `{query, neighbors: [{label, cluster, distance}], prompt}`.
    pub fn knn_json(&self, label: &str, k: usize) -> Result<String, String> {
        let nn = embedding::nearest_neighbors(&self.store, label, k, None).map_err(|e| e.to_string())?;
        let prompt = embedding::enrich_prompt(&self.store, label, k.min(3), &PromptTemplate::default())
            .map_err(|e| e.to_string())?;
        let out = KnnOut {
            query: nn.query,
            neighbors: nn
                .neighbors
                .into_iter()
                .map(|n| NeighborOut {
                    cluster: self.cluster(&n.label),
                    label: n.label,
                    distance: n.distance,
                })
                .collect(),
            prompt,
        };
        Ok(serde_json::to_string(&out).expect("neighbors serialize"))
    }
}

fn js_err(e: String) -> JsError {
    JsError::new(&e)
}

/// Handle held by the page.
#[wasm_bindgen]
pub struct WebModel(Demo);

#[wasm_bindgen]
impl WebModel {
    #[wasm_bindgen(constructor)]
    pub fn new(
        scenes: usize,
        clusters: usize,
        per_cluster: usize,
        dim: usize,
        epochs: usize,
        seed: u32,
    ) -> Result<WebModel, JsError> {
        let p = DemoParams {
            scenes,
            clusters,
            per_cluster,
            dim,
            epochs,
            seed: seed as u64,
        };
        Demo::train(p).map(WebModel).map_err(js_err)
    }

    pub fn summary(&self) -> String {
        self.0.summary_json()
    }

    pub fn pca(&self) -> Result<String, JsError> {
        self.0.pca_json().map_err(js_err)
    }

    pub fn project(&self, a: &str, b: &str) -> Result<String, JsError> {
        self.0.project_json(a, b).map_err(js_err)
    }

    pub fn knn(&self, label: &str, k: usize) -> Result<String, JsError> {
        self.0.knn_json(label, k).map_err(js_err)
    }
}
