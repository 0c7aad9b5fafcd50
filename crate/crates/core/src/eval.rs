//! Masking evaluation: hide one label of a multi-object scene, rank every
//! class by summed cosine similarity to the labels left visible, and count how
//! often the hidden class lands in the top k.
//!
//! Also home to the seeded synthetic-scene generator used for desk-scale checks.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{self, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{SceneSentence, Vocabulary};
use crate::embedding::EmbeddingStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskingInstance {
    pub image_id: String,
    pub visible: Vec<u32>,
    pub answer: u32,
}

/// One instance per position of every sentence with at least two tokens.
/// Duplicates of the masked class stay visible.
pub fn make_instances(sentences: &[SceneSentence]) -> Vec<MaskingInstance> {
    sentences
        .iter()
        .filter(|s| s.len() >= 2)
        .flat_map(|s| {
            (0..s.len()).map(move |p| {
                let mut visible = s.tokens.clone();
                let answer = visible.remove(p);
                MaskingInstance {
                    image_id: s.image_id.clone(),
                    visible,
                    answer,
                }
            })
        })
        .collect()
}

/// Scores every class against the visible rows and sorts descending, ties by
/// class id. Zero-norm classes score `-inf` and sink to the bottom.
pub fn score_classes(store: &EmbeddingStore, visible: &[u32]) -> Result<Vec<(u32, f64)>> {
    if visible.is_empty() {
        return Err(Error::Domain(
            "cannot score classes from an empty visible set".into(),
        ));
    }
    let v = store.len();
    let units = unit_rows(store);
    for &b in visible {
        let b = b as usize;
        if b >= v {
            return Err(Error::Data(format!("label id {b} outside embedding of size {v}")));
        }
        if units[b].is_none() {
            return Err(Error::Domain(format!(
                "visible label {:?} has a zero vector",
                store.labels()[b]
            )));
        }
    }
    let mut scored: Vec<(u32, f64)> = (0..v)
        .map(|c| {
            let s = match &units[c] {
                None => f64::NEG_INFINITY,
                Some(uc) => visible
                    .iter()
                    .map(|&b| dot(units[b as usize].as_deref().unwrap(), uc))
                    .sum(),
            };
            (c as u32, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored)
}

fn unit_rows(store: &EmbeddingStore) -> Vec<Option<Vec<f64>>> {
    (0..store.len())
        .map(|k| {
            let n = store.norm(k);
            (n > 0.0).then(|| store.row(k).iter().map(|x| x / n).collect())
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 1-based rank of the answer in [`score_classes`] order.
fn answer_rank(store: &EmbeddingStore, units: &[Option<Vec<f64>>], inst: &MaskingInstance) -> Result<usize> {
    let v = store.len();
    let a = inst.answer as usize;
    if a >= v {
        return Err(Error::Data(format!(
            "answer id {a} outside embedding of size {v}"
        )));
    }
    for &b in &inst.visible {
        units
            .get(b as usize)
            .ok_or_else(|| Error::Data(format!("label id {b} outside embedding of size {v}")))?
            .as_ref()
            .ok_or_else(|| {
                Error::Domain(format!(
                    "visible label {:?} has a zero vector",
                    store.labels()[b as usize]
                ))
            })?;
    }
    // same ordering rule as score_classes, without the full sort
    let score = |c: usize| match &units[c] {
        None => f64::NEG_INFINITY,
        Some(uc) => inst
            .visible
            .iter()
            .map(|&b| dot(units[b as usize].as_deref().unwrap(), uc))
            .sum(),
    };
    let sa = score(a);
    let ahead = (0..v)
        .filter(|&c| c != a)
        .filter(|&c| {
            let sc = score(c);
            sc > sa || (sc == sa && c < a)
        })
        .count();
    Ok(ahead + 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InstanceRank {
    pub image_id: String,
    pub answer: u32,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAccuracy {
    pub class: u32,
    pub count: usize,
    pub hits: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskingReport {
    pub instances: usize,
    pub ks: Vec<usize>,
    pub hits: Vec<usize>,
    pub per_class: Vec<ClassAccuracy>,
    pub ranks: Vec<InstanceRank>,
}

#[derive(Serialize)]
struct JsonLine {
    k: usize,
    accuracy: Option<f64>,
    count: usize,
}

impl MaskingReport {
    /// Percentages per k, or `None` when there were no instances.
    pub fn accuracies(&self) -> Option<Vec<f64>> {
        (self.instances > 0).then(|| {
            self.hits
                .iter()
                .map(|&h| 100.0 * h as f64 / self.instances as f64)
                .collect()
        })
    }

    pub fn accuracy_at(&self, k: usize) -> Option<f64> {
        let pos = self.ks.iter().position(|&x| x == k)?;
        self.accuracies().map(|a| a[pos])
    }

    pub fn to_table(&self, baseline: Option<&[f64]>) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<16}", "");
        for k in &self.ks {
            let _ = write!(out, "{:>10}", format!("Acc@{k}"));
        }
        out.push('\n');
        if let Some(b) = baseline {
            let _ = write!(out, "{:<16}", "random guess");
            for v in b {
                let _ = write!(out, "{v:>10.2}");
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<16}", "embedding");
        match self.accuracies() {
            Some(acc) => {
                for v in acc {
                    let _ = write!(out, "{v:>10.2}");
                }
            }
            None => {
                for _ in &self.ks {
                    let _ = write!(out, "{:>10}", "undefined");
                }
            }
        }
        let _ = writeln!(out, "\ninstances: {}", self.instances);
        out
    }

    /// One JSON object per k: `{"k":..,"accuracy":..,"count":..}`. Accuracy is
    /// `null` when there were no instances.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        let acc = self.accuracies();
        for (n, &k) in self.ks.iter().enumerate() {
            let line = JsonLine {
                k,
                accuracy: acc.as_ref().map(|a| a[n]),
                count: self.instances,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    /// `image_id<TAB>answer<TAB>rank_of_answer` per instance.
    pub fn write_dump<W: Write>(&self, mut w: W, labels: Option<&[String]>) -> io::Result<()> {
        for r in &self.ranks {
            match labels.and_then(|l| l.get(r.answer as usize)) {
                Some(name) => writeln!(w, "{}\t{}\t{}", r.image_id, name, r.rank)?,
                None => writeln!(w, "{}\t{}\t{}", r.image_id, r.answer, r.rank)?,
            }
        }
        w.flush()
    }
}

/// Runs the masking task over `sentences`, whose token ids index store rows.
pub fn evaluate(
    store: &EmbeddingStore,
    sentences: &[SceneSentence],
    ks: &[usize],
    threads: usize,
) -> Result<MaskingReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config(
            "ks must be a non-empty list of positive integers".into(),
        ));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("ks must be strictly ascending".into()));
    }
    let instances = make_instances(sentences);
    let units = unit_rows(store);
    let rank_all = |part: &[MaskingInstance]| -> Result<Vec<usize>> {
        part.iter().map(|inst| answer_rank(store, &units, inst)).collect()
    };
    let ranks: Vec<usize> = if threads <= 1 || instances.len() < 2 * threads {
        rank_all(&instances)?
    } else {
        let chunk = instances.len().div_ceil(threads);
        let parts: Vec<Result<Vec<usize>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = instances
                .chunks(chunk)
                .map(|p| scope.spawn(move || rank_all(p)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("eval worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(instances.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };

    let mut hits = vec![0; ks.len()];
    let mut per_class: BTreeMap<u32, ClassAccuracy> = BTreeMap::new();
    for (inst, &rank) in instances.iter().zip(&ranks) {
        let entry = per_class.entry(inst.answer).or_insert_with(|| ClassAccuracy {
            class: inst.answer,
            count: 0,
            hits: vec![0; ks.len()],
        });
        entry.count += 1;
        for (n, &k) in ks.iter().enumerate() {
            if rank <= k {
                hits[n] += 1;
                entry.hits[n] += 1;
            }
        }
    }
    Ok(MaskingReport {
        instances: instances.len(),
        ks: ks.to_vec(),
        hits,
        per_class: per_class.into_values().collect(),
        ranks: instances
            .into_iter()
            .zip(ranks)
            .map(|(i, rank)| InstanceRank {
                image_id: i.image_id,
                answer: i.answer,
                rank,
            })
            .collect(),
    })
}

/// Expected Acc@k in percent when guessing uniformly over `vocab_size` classes.
pub fn random_baseline(vocab_size: usize, ks: &[usize]) -> Result<Vec<f64>> {
    if ks.iter().any(|&k| k == 0 || k > vocab_size) {
        return Err(Error::Config(format!("every k must lie in 1..={vocab_size}")));
    }
    Ok(ks.iter().map(|&k| 100.0 * k as f64 / vocab_size as f64).collect())
}

/// Re-indexes sentences from vocabulary ids to rows of `store`, matching by
/// label. Tokens whose label the store lacks are an error.
pub fn align_to_store(
    sentences: &[SceneSentence],
    vocab: &Vocabulary,
    store: &EmbeddingStore,
) -> Result<Vec<SceneSentence>> {
    let map: Vec<u32> = vocab
        .labels()
        .iter()
        .map(|l| store.lookup(l).map(|k| k as u32))
        .collect::<Result<_>>()?;
    sentences
        .iter()
        .map(|s| {
            let tokens = s
                .tokens
                .iter()
                .map(|&t| {
                    map.get(t as usize)
                        .copied()
                        .ok_or_else(|| Error::Data(format!("label id {t} not in vocabulary")))
                })
                .collect::<Result<_>>()?;
            Ok(SceneSentence::new(s.image_id.clone(), tokens))
        })
        .collect()
}

/// Recipe for synthetic scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    /// Disjoint label groups; each scene draws mostly from one group.
    pub groups: Vec<Vec<String>>,
    /// Inclusive range of boxes per scene.
    pub scene_size: (usize, usize),
    /// Probability that a box comes from the scene's home group; otherwise it
    /// is drawn from a uniformly chosen other group.
    pub within_prob: f64,
    /// Zipf exponent for label popularity inside a group (0 = uniform).
    pub label_skew: f64,
}

impl ClusterSpec {
    /// `clusters` groups of `per_cluster` labels named `c{g}_{k}`.
    pub fn uniform(clusters: usize, per_cluster: usize) -> Self {
        ClusterSpec {
            groups: (0..clusters)
                .map(|g| (0..per_cluster).map(|k| format!("c{g}_{k}")).collect())
                .collect(),
            scene_size: (2, 8),
            within_prob: 0.9,
            label_skew: 1.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() || self.groups.iter().any(Vec::is_empty) {
            return Err(Error::Config("cluster spec needs non-empty groups".into()));
        }
        let mut seen = HashSet::new();
        for l in self.groups.iter().flatten() {
            if !seen.insert(l) {
                return Err(Error::Config(format!(
                    "label {l:?} appears in more than one group"
                )));
            }
        }
        let (lo, hi) = self.scene_size;
        if lo == 0 || lo > hi {
            return Err(Error::Config("scene size range must be 1 <= min <= max".into()));
        }
        if !(0.0..=1.0).contains(&self.within_prob) {
            return Err(Error::Config("within_prob must lie in [0, 1]".into()));
        }
        if self.groups.len() == 1 && self.within_prob < 1.0 {
            return Err(Error::Config("a single group needs within_prob = 1".into()));
        }
        if !(self.label_skew >= 0.0 && self.label_skew.is_finite()) {
            return Err(Error::Config("label_skew must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub sentences: Vec<SceneSentence>,
    pub vocab: Vocabulary,
    /// Group index of every generated label.
    pub cluster_of: HashMap<String, usize>,
}

/// Seeded scene generator. Labels are ranked into a vocabulary by frequency
/// exactly as real annotations would be.
pub fn generate_synthetic_corpus(n_scenes: usize, spec: &ClusterSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pickers: Vec<WeightedIndex<f64>> = spec
        .groups
        .iter()
        .map(|g| {
            let w: Vec<f64> = (0..g.len())
                .map(|r| 1.0 / ((r + 1) as f64).powf(spec.label_skew))
                .collect();
            WeightedIndex::new(w).expect("positive weights")
        })
        .collect();
    let n_groups = spec.groups.len();
    let mut scenes: Vec<Vec<&str>> = Vec::with_capacity(n_scenes);
    for _ in 0..n_scenes {
        let home = rng.gen_range(0..n_groups);
        let size = rng.gen_range(spec.scene_size.0..=spec.scene_size.1);
        let mut labels: Vec<&str> = (0..size)
            .map(|_| {
                let g = if rng.gen_bool(spec.within_prob) {
                    home
                } else {
                    let other = rng.gen_range(0..n_groups - 1);
                    if other >= home {
                        other + 1
                    } else {
                        other
                    }
                };
                spec.groups[g][pickers[g].sample(&mut rng)].as_str()
            })
            .collect();
        labels.shuffle(&mut rng);
        scenes.push(labels);
    }
    let vocab = crate::corpus::build_vocabulary(scenes.iter().flatten(), 1)?;
    let sentences = scenes
        .iter()
        .enumerate()
        .map(|(n, s)| {
            SceneSentence::new(
                format!("scene{n:06}"),
                s.iter().map(|l| vocab.id(l).unwrap()).collect(),
            )
        })
        .collect();
    let cluster_of = spec
        .groups
        .iter()
        .enumerate()
        .flat_map(|(g, ls)| ls.iter().map(move |l| (l.clone(), g)))
        .collect();
    Ok(SyntheticCorpus {
        sentences,
        vocab,
        cluster_of,
    })
}
