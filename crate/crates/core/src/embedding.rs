//! Trained embedding queries: cosine neighbors, semantic-axis projection,
//! 2-D PCA and "with"-phrase prompt enrichment.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Labeled row-major `V x d` matrix with cached row norms.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    labels: Vec<String>,
    counts: Option<Vec<u64>>,
    dim: usize,
    data: Vec<f64>,
    norms: Vec<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(labels: Vec<String>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("embedding dimension must be at least 1".into()));
        }
        if data.len() != labels.len() * dim {
            return Err(Error::Data(format!(
                "{} labels x {dim} dims needs {} values, got {}",
                labels.len(),
                labels.len() * dim,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite embedding value {bad}")));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (k, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), k).is_some() {
                return Err(Error::Data(format!("duplicate label {l:?}")));
            }
        }
        let norms = data.chunks_exact(dim).map(norm).collect();
        Ok(EmbeddingStore {
            labels,
            counts: None,
            dim,
            data,
            norms,
            index,
        })
    }

    /// Attaches per-label training counts (used by count-filtered queries).
    pub fn with_counts(mut self, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != self.labels.len() {
            return Err(Error::Data("count list length differs from vocabulary".into()));
        }
        self.counts = Some(counts);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn counts(&self) -> Option<&[u64]> {
        self.counts.as_deref()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn norm(&self, k: usize) -> f64 {
        self.norms[k]
    }

    /// Rows whose norm is zero; these are excluded from cosine queries.
    pub fn zero_rows(&self) -> Vec<&str> {
        self.norms
            .iter()
            .zip(&self.labels)
            .filter(|(n, _)| **n == 0.0)
            .map(|(_, l)| l.as_str())
            .collect()
    }

    /// Row index of `label`, or an error suggesting close spellings.
    pub fn lookup(&self, label: &str) -> Result<usize> {
        if let Some(&k) = self.index.get(label) {
            return Ok(k);
        }
        let lower = label.to_lowercase();
        let mut scored: Vec<(f64, &String)> = self
            .labels
            .iter()
            .map(|l| (strsim::jaro_winkler(&lower, &l.to_lowercase()), l))
            .filter(|(s, _)| *s > 0.8)
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        Err(Error::UnknownLabel {
            label: label.to_string(),
            suggestions: scored.into_iter().take(5).map(|(_, l)| l.clone()).collect(),
        })
    }

    fn cosine_rows(&self, a: usize, b: usize) -> f64 {
        dot(self.row(a), self.row(b)) / (self.norms[a] * self.norms[b])
    }

    fn require_nonzero(&self, k: usize) -> Result<()> {
        if self.norms[k] == 0.0 {
            Err(Error::Domain(format!(
                "label {:?} has a zero vector",
                self.labels[k]
            )))
        } else {
            Ok(())
        }
    }

    /// Cosine similarity between two stored labels.
    pub fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        let (ia, ib) = (self.lookup(a)?, self.lookup(b)?);
        self.require_nonzero(ia)?;
        self.require_nonzero(ib)?;
        Ok(self.cosine_rows(ia, ib))
    }

    /// Writes the word-vector text format: a `V d` header line, then
    /// `label v1 ... vd` per row. Floats print in shortest round-trip form.
    pub fn write_text<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{} {}", self.len(), self.dim)?;
        for (k, l) in self.labels.iter().enumerate() {
            w.write_all(l.as_bytes())?;
            for v in self.row(k) {
                write!(w, " {v}")?;
            }
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    /// Reads the text format, with or without the `V d` header. Labels may
    /// contain spaces: the last `d` fields of each line are the vector.
    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let bad = |n: usize, m: String| Error::format("embedding text", format!("line {}: {m}", n + 1));
        let mut lines = r.lines().enumerate().peekable();
        let mut dim: Option<usize> = None;
        let mut expected_rows: Option<usize> = None;
        if let Some((_, Ok(first))) = lines.peek() {
            let fields: Vec<&str> = first.split_ascii_whitespace().collect();
            if let [v, d] = fields.as_slice() {
                if let (Ok(v), Ok(d)) = (v.parse::<usize>(), d.parse::<usize>()) {
                    expected_rows = Some(v);
                    dim = Some(d);
                    lines.next();
                }
            }
        }
        let mut labels = Vec::new();
        let mut data = Vec::new();
        for (n, line) in lines {
            let line = line.map_err(|e| bad(n, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(' ').filter(|f| !f.is_empty()).collect();
            let d = match dim {
                Some(d) => d,
                None => {
                    // headerless: the trailing numeric run fixes d
                    let d = fields
                        .iter()
                        .rev()
                        .take_while(|f| f.parse::<f64>().is_ok())
                        .count();
                    let d = if d == fields.len() { d - 1 } else { d };
                    *dim.insert(d)
                }
            };
            if fields.len() < d + 1 {
                return Err(bad(n, format!("expected a label and {d} values")));
            }
            let split = fields.len() - d;
            labels.push(fields[..split].join(" "));
            for f in &fields[split..] {
                data.push(f.parse::<f64>().map_err(|_| bad(n, format!("bad value {f:?}")))?);
            }
        }
        if let Some(v) = expected_rows {
            if v != labels.len() {
                return Err(Error::format(
                    "embedding text",
                    format!("header promises {v} rows, found {}", labels.len()),
                ));
            }
        }
        EmbeddingStore::new(labels, dim.unwrap_or(1), data)
    }

    /// Binary layout (little-endian): magic `SCNVEC01`, u64 V, u64 d, then per
    /// row a u32 label length, label bytes and d f64 values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        for (k, l) in self.labels.iter().enumerate() {
            w.write_all(&(l.len() as u32).to_le_bytes())?;
            w.write_all(l.as_bytes())?;
            for v in self.row(k) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::format("embedding binary", m);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| bad(&e.to_string()))?;
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != BINARY_MAGIC {
            return Err(bad("bad magic"));
        }
        let v = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut labels = Vec::with_capacity(v);
        let mut data = Vec::with_capacity(v.saturating_mul(d).min(1 << 24));
        for _ in 0..v {
            let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let label = std::str::from_utf8(take(n)?).map_err(|_| bad("label is not UTF-8"))?;
            labels.push(label.to_string());
            for c in take(d * 8)?.chunks_exact(8) {
                data.push(f64::from_le_bytes(c.try_into().unwrap()));
            }
        }
        EmbeddingStore::new(labels, d, data)
    }

    /// Loads either format, sniffing the binary magic.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let head = r.fill_buf().map_err(|e| Error::io(path, e))?;
        if head.starts_with(BINARY_MAGIC) {
            Self::read_binary(r)
        } else {
            Self::read_text(r)
        }
    }

    pub fn save_text(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_text(BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_binary(BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }
}

const BINARY_MAGIC: &[u8; 8] = b"SCNVEC01";

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `u . v / (|u| |v|)`. Zero vectors are a domain error.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Domain(format!(
            "dimension mismatch {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    Ok(dot(u, v) / (nu * nv))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub label: String,
    /// `1 - cosine similarity`, in `[0, 2]`.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub query: String,
    pub neighbors: Vec<Neighbor>,
}

impl NeighborList {
    /// `rank<TAB>label<TAB>distance` lines, ranks from 1.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (r, n) in self.neighbors.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}", r + 1, n.label, n.distance)?;
        }
        w.flush()
    }
}

/// Exact k nearest labels by cosine distance, excluding the query and any
/// zero rows. With `min_count`, candidates with fewer training occurrences
/// are skipped (needs counts attached to the store). Ties break by row order.
pub fn nearest_neighbors(
    store: &EmbeddingStore,
    label: &str,
    k: usize,
    min_count: Option<u64>,
) -> Result<NeighborList> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let q = store.lookup(label)?;
    store.require_nonzero(q)?;
    let counts = match (min_count, store.counts()) {
        (Some(_), None) => {
            return Err(Error::Config(
                "count filter needs label counts (pass the vocabulary)".into(),
            ))
        }
        (Some(m), Some(c)) => Some((m, c)),
        (None, _) => None,
    };
    let mut scored: Vec<(f64, usize)> = (0..store.len())
        .filter(|&c| c != q && store.norms[c] > 0.0)
        .filter(|&c| counts.is_none_or(|(m, cs)| cs[c] >= m))
        .map(|c| ((1.0 - store.cosine_rows(q, c)).clamp(0.0, 2.0), c))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    Ok(NeighborList {
        query: store.labels[q].clone(),
        neighbors: scored
            .into_iter()
            .map(|(distance, c)| Neighbor {
                label: store.labels[c].clone(),
                distance,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxisProjection {
    pub anchor_a: String,
    pub anchor_b: String,
    /// `(label, coordinate)`; larger coordinates lie toward `anchor_b`.
    pub coordinates: Vec<(String, f64)>,
}

impl AxisProjection {
    /// Coordinates sorted ascending, ties by label.
    pub fn sorted(&self) -> Vec<(String, f64)> {
        let mut out = self.coordinates.clone();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        out
    }
}

/// Projects `labels` (all labels when empty) onto the unit vector pointing
/// from `anchor_a` to `anchor_b`.
pub fn project_axis(
    store: &EmbeddingStore,
    anchor_a: &str,
    anchor_b: &str,
    labels: &[String],
) -> Result<AxisProjection> {
    if anchor_a == anchor_b {
        return Err(Error::Domain("axis anchors must be distinct".into()));
    }
    let (a, b) = (store.lookup(anchor_a)?, store.lookup(anchor_b)?);
    let axis: Vec<f64> = store
        .row(b)
        .iter()
        .zip(store.row(a))
        .map(|(y, x)| y - x)
        .collect();
    let len = norm(&axis);
    if len == 0.0 {
        return Err(Error::Domain(format!(
            "{anchor_a:?} and {anchor_b:?} have identical vectors"
        )));
    }
    let unit: Vec<f64> = axis.iter().map(|v| v / len).collect();
    let rows: Vec<usize> = if labels.is_empty() {
        (0..store.len()).collect()
    } else {
        labels.iter().map(|l| store.lookup(l)).collect::<Result<_>>()?
    };
    Ok(AxisProjection {
        anchor_a: anchor_a.to_string(),
        anchor_b: anchor_b.to_string(),
        coordinates: rows
            .into_iter()
            .map(|k| (store.labels[k].clone(), dot(store.row(k), &unit)))
            .collect(),
    })
}

/// Power-iteration convergence tolerance and cap.
pub const PCA_TOLERANCE: f64 = 1e-10;
pub const PCA_MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub points: Vec<(String, f64, f64)>,
    /// Top-two covariance eigenvalues, descending.
    pub eigenvalues: [f64; 2],
    /// Unit principal directions in embedding space.
    pub components: [Vec<f64>; 2],
}

/// 2-D PCA of the chosen rows (all rows when `labels` is empty).
///
/// Rows are mean-centered; the top two covariance eigenvectors come from
/// power iteration with deflation, and each is signed so its largest-magnitude
/// loading is positive.
pub fn pca_2d(store: &EmbeddingStore, labels: &[String]) -> Result<PcaProjection> {
    let rows: Vec<usize> = if labels.is_empty() {
        (0..store.len()).collect()
    } else {
        labels.iter().map(|l| store.lookup(l)).collect::<Result<_>>()?
    };
    let (n, d) = (rows.len(), store.dim);
    if n < 3 {
        return Err(Error::Domain("PCA needs at least 3 labels".into()));
    }
    if d < 2 {
        return Err(Error::Domain("PCA needs at least 2 dimensions".into()));
    }
    let mut mean = vec![0.0; d];
    for &r in &rows {
        for (m, v) in mean.iter_mut().zip(store.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|&r| store.row(r).iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    let mut cov = vec![0.0; d * d];
    for x in &centered {
        for a in 0..d {
            let xa = x[a];
            for b in a..d {
                cov[a * d + b] += xa * x[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / (n - 1) as f64;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }

    let trace: f64 = (0..d).map(|a| cov[a * d + a]).sum();
    let scale = trace.max(f64::MIN_POSITIVE);
    let (l1, v1) = top_eigenpair(&cov, d, None);
    let mut deflated = cov.clone();
    for a in 0..d {
        for b in 0..d {
            deflated[a * d + b] -= l1 * v1[a] * v1[b];
        }
    }
    let (l2, v2) = top_eigenpair(&deflated, d, Some(&v1));
    if l1 <= 1e-12 * scale || l2 <= 1e-12 * scale {
        return Err(Error::Domain(
            "degenerate data: fewer than two directions of variance".into(),
        ));
    }

    let points = rows
        .iter()
        .zip(&centered)
        .map(|(&r, x)| (store.labels[r].clone(), dot(x, &v1), dot(x, &v2)))
        .collect();
    Ok(PcaProjection {
        points,
        eigenvalues: [l1, l2],
        components: [v1, v2],
    })
}

fn mat_vec(m: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    m.chunks_exact(d).map(|row| dot(row, v)).collect()
}

fn orthogonalize(v: &mut [f64], against: &[f64]) {
    let p = dot(v, against);
    v.iter_mut().zip(against).for_each(|(x, a)| *x -= p * a);
}

fn fix_sign(v: &mut [f64]) {
    let big = v
        .iter()
        .copied()
        .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if big < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Dominant eigenpair of a symmetric PSD matrix by power iteration.
fn top_eigenpair(m: &[f64], d: usize, orth: Option<&[f64]>) -> (f64, Vec<f64>) {
    // fixed, non-symmetric start so it is unlikely to be orthogonal to the answer
    let mut v: Vec<f64> = (0..d).map(|k| 1.0 + ((k * 7919) % 101) as f64 / 101.0).collect();
    if let Some(o) = orth {
        orthogonalize(&mut v, o);
    }
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    for _ in 0..PCA_MAX_ITERATIONS {
        let mut w = mat_vec(m, d, &v);
        if let Some(o) = orth {
            orthogonalize(&mut w, o);
        }
        let nw = norm(&w);
        if nw == 0.0 {
            return (0.0, v);
        }
        w.iter_mut().for_each(|x| *x /= nw);
        let delta = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if delta < PCA_TOLERANCE {
            break;
        }
    }
    fix_sign(&mut v);
    let lambda = dot(&v, &mat_vec(m, d, &v));
    (lambda.max(0.0), v)
}

/// Rendering options for [`enrich_prompt`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub preposition: String,
    /// Comma before the final "and" once three or more neighbors are listed.
    pub oxford_comma: bool,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            preposition: "with".into(),
            oxford_comma: true,
        }
    }
}

fn article(word: &str) -> &'static str {
    match word.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Joins a subject and its companions: "a house with window, door, and stairs".
pub fn render_prompt(subject: &str, companions: &[String], template: &PromptTemplate) -> String {
    let subject = subject.to_lowercase();
    let mut out = format!("{} {}", article(&subject), subject);
    let items: Vec<String> = companions.iter().map(|c| c.to_lowercase()).collect();
    let body = match items.as_slice() {
        [] => return out,
        [one] => one.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => {
            let sep = if template.oxford_comma { ", and " } else { " and " };
            format!("{}{sep}{last}", init.join(", "))
        }
    };
    out.push(' ');
    out.push_str(&template.preposition);
    out.push(' ');
    out.push_str(&body);
    out
}

/// Prompt for `label` completed with its `k` nearest neighbors. Neighbors
/// whose lowercase name equals the query's are skipped.
pub fn enrich_prompt(
    store: &EmbeddingStore,
    label: &str,
    k: usize,
    template: &PromptTemplate,
) -> Result<String> {
    let q = store.lookup(label)?;
    let subject = store.labels[q].to_lowercase();
    if k == 0 {
        return Ok(render_prompt(&subject, &[], template));
    }
    let all = nearest_neighbors(store, label, store.len().max(1), None)?;
    let companions: Vec<String> = all
        .neighbors
        .into_iter()
        .map(|n| n.label)
        .filter(|l| l.to_lowercase() != subject)
        .take(k)
        .collect();
    Ok(render_prompt(&subject, &companions, template))
}

/// `label,x` lines (or `label,x,y`), quoting labels when needed.
pub fn write_points_csv<W: Write>(w: W, points: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<()> {
    let mut wr = csv::WriterBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_writer(w);
    for (label, coords) in points {
        let mut rec = vec![label];
        rec.extend(coords.iter().map(f64::to_string));
        wr.write_record(&rec)?;
    }
    wr.flush().map_err(|e| Error::format("csv export", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store(rows: &[(&str, &[f64])]) -> EmbeddingStore {
        let d = rows[0].1.len();
        EmbeddingStore::new(
            rows.iter().map(|r| r.0.to_string()).collect(),
            d,
            rows.iter().flat_map(|r| r.1.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[0.3, 0.4], &[0.3, 0.4]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 0.707_106_781_186_547_5).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn scaled_copy_is_nearest_at_zero() {
        let s = store(&[("A", &[1.0, 2.0]), ("B", &[2.0, 4.0]), ("C", &[-1.0, 0.5])]);
        let nn = nearest_neighbors(&s, "A", 2, None).unwrap();
        assert_eq!(nn.neighbors[0].label, "B");
        assert!(nn.neighbors[0].distance < 1e-15);
        assert_eq!(nn.neighbors.len(), 2);
        assert!(nn.neighbors.iter().all(|n| n.label != "A"));
    }

    #[test]
    fn planted_clusters_match_brute_force() {
        let s = store(&[
            ("a1", &[1.0, 0.1, 0.0]),
            ("a2", &[0.9, 0.2, 0.0]),
            ("b1", &[0.0, 0.1, 1.0]),
            ("b2", &[0.1, 0.0, 0.8]),
        ]);
        for (q, mate) in [("a1", "a2"), ("a2", "a1"), ("b1", "b2"), ("b2", "b1")] {
            let brute = s
                .labels()
                .iter()
                .filter(|l| *l != q)
                .min_by(|x, y| {
                    let dx = 1.0 - s.similarity(q, x).unwrap();
                    let dy = 1.0 - s.similarity(q, y).unwrap();
                    dx.total_cmp(&dy)
                })
                .unwrap();
            assert_eq!(brute, mate);
            assert_eq!(
                nearest_neighbors(&s, q, 1, None).unwrap().neighbors[0].label,
                mate
            );
        }
    }

    #[test]
    fn count_filter_and_zero_rows() {
        let s = store(&[
            ("A", &[1.0, 0.0]),
            ("B", &[1.0, 0.1]),
            ("C", &[1.0, 0.5]),
            ("Z", &[0.0, 0.0]),
        ])
        .with_counts(vec![50, 5, 50, 50])
        .unwrap();
        assert_eq!(s.zero_rows(), ["Z"]);
        let nn = nearest_neighbors(&s, "A", 3, Some(10)).unwrap();
        let labels: Vec<_> = nn.neighbors.iter().map(|n| n.label.as_str()).collect();
        assert_eq!(labels, ["C"]);
        assert!(matches!(
            nearest_neighbors(&s, "Z", 1, None),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn unknown_label_suggests() {
        let s = store(&[("Human face", &[1.0, 0.0]), ("Tree", &[0.0, 1.0])]);
        match nearest_neighbors(&s, "human fac", 1, None).unwrap_err() {
            Error::UnknownLabel { suggestions, .. } => assert_eq!(suggestions, ["Human face"]),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn neighbor_tsv() {
        let s = store(&[("A", &[1.0, 0.0]), ("B", &[1.0, 0.0]), ("C", &[0.0, 1.0])]);
        let mut buf = Vec::new();
        nearest_neighbors(&s, "A", 2, None)
            .unwrap()
            .write_tsv(&mut buf)
            .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "1\tB\t0\n2\tC\t1\n");
    }

    #[test]
    fn projection_identities() {
        let s = store(&[
            ("a", &[1.0, 2.0, 0.5]),
            ("b", &[-1.0, 0.5, 3.0]),
            ("mid", &[0.0, 1.25, 1.75]),
        ]);
        let p = project_axis(&s, "a", "b", &[]).unwrap();
        let c: HashMap<_, _> = p.coordinates.iter().cloned().collect();
        let len = norm(&[-2.0, -1.5, 2.5]);
        assert!((c["b"] - c["a"] - len).abs() < 1e-12);
        assert!((c["mid"] - (c["a"] + c["b"]) / 2.0).abs() < 1e-12);
        assert!(matches!(project_axis(&s, "a", "a", &[]), Err(Error::Domain(_))));
        let dup = store(&[("a", &[1.0, 1.0]), ("b", &[1.0, 1.0])]);
        assert!(matches!(project_axis(&dup, "a", "b", &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn projection_orders_interpolants() {
        let va = [0.2, -1.0, 0.7];
        let vb = [1.5, 0.3, -0.4];
        let at = |t: f64| -> Vec<f64> { va.iter().zip(&vb).map(|(a, b)| a + t * (b - a)).collect() };
        let (t0, t1, t2) = (at(0.0), at(0.25), at(1.0));
        let s = store(&[("a", &va), ("b", &vb), ("t0", &t0), ("t25", &t1), ("t1", &t2)]);
        let names: Vec<String> = ["t1", "t0", "t25"].iter().map(|s| s.to_string()).collect();
        let p = project_axis(&s, "a", "b", &names).unwrap();
        let order: Vec<_> = p.sorted().into_iter().map(|(l, _)| l).collect();
        assert_eq!(order, ["t0", "t25", "t1"]);
    }

    #[test]
    fn pca_degenerate_inputs() {
        let same = store(&[("a", &[1.0, 1.0]), ("b", &[1.0, 1.0]), ("c", &[1.0, 1.0])]);
        assert!(matches!(pca_2d(&same, &[]), Err(Error::Domain(_))));
        let line = store(&[("a", &[0.0, 0.0]), ("b", &[1.0, 1.0]), ("c", &[2.0, 2.0])]);
        assert!(matches!(pca_2d(&line, &[]), Err(Error::Domain(_))));
        let two = store(&[("a", &[0.0, 0.0]), ("b", &[1.0, 1.0])]);
        assert!(matches!(pca_2d(&two, &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn pca_sign_convention() {
        let s = store(&[
            ("a", &[3.0, 0.0, 0.1]),
            ("b", &[-3.0, 0.0, 0.0]),
            ("c", &[0.0, 1.0, 0.0]),
            ("d", &[0.0, -1.0, 0.0]),
        ]);
        let p = pca_2d(&s, &[]).unwrap();
        for c in &p.components {
            let big = c
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(big > 0.0);
        }
        assert!(p.eigenvalues[0] >= p.eigenvalues[1]);
        assert!(p.components[0][0].abs() > 0.999);
    }

    #[test]
    fn prompt_forms() {
        let t = PromptTemplate::default();
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(
            render_prompt("House", &v(&["Window", "Door", "Stairs"]), &t),
            "a house with window, door, and stairs"
        );
        assert_eq!(
            render_prompt("Sofa bed", &v(&["Pillow"]), &t),
            "a sofa bed with pillow"
        );
        assert_eq!(
            render_prompt("House", &v(&["Window", "Door"]), &t),
            "a house with window and door"
        );
        assert_eq!(render_prompt("House", &[], &t), "a house");
        let plain = PromptTemplate {
            oxford_comma: false,
            ..t
        };
        assert_eq!(
            render_prompt("sofa bed", &v(&["pillow", "bookcase", "coffee table"]), &plain),
            "a sofa bed with pillow, bookcase and coffee table"
        );
        assert_eq!(
            render_prompt("Apple", &[], &PromptTemplate::default()),
            "an apple"
        );
    }

    #[test]
    fn enrich_uses_neighbors() {
        let s = store(&[
            ("House", &[1.0, 0.0, 0.0]),
            ("Window", &[0.95, 0.05, 0.0]),
            ("Door", &[0.9, 0.2, 0.0]),
            ("Stairs", &[0.8, 0.4, 0.1]),
            ("Fish", &[0.0, 0.0, 1.0]),
            ("house", &[0.99, 0.0, 0.0]),
        ]);
        let t = PromptTemplate::default();
        assert_eq!(
            enrich_prompt(&s, "House", 3, &t).unwrap(),
            "a house with window, door, and stairs"
        );
        assert_eq!(enrich_prompt(&s, "House", 0, &t).unwrap(), "a house");
        assert!(matches!(
            enrich_prompt(&s, "Boat", 1, &t),
            Err(Error::UnknownLabel { .. })
        ));
    }

    #[test]
    fn text_round_trip_with_spaced_labels() {
        let s = store(&[("Human face", &[0.1, -2.5e-7]), ("Tree", &[1.0 / 3.0, 4.0])]);
        let mut buf = Vec::new();
        s.write_text(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("2 2\nHuman face 0.1 -0.00000025\n"));
        assert_eq!(EmbeddingStore::read_text(buf.as_slice()).unwrap(), s);

        let headerless = "cat 1 2 3\nbig dog 4 5 6\n";
        let h = EmbeddingStore::read_text(headerless.as_bytes()).unwrap();
        assert_eq!(h.dim(), 3);
        assert_eq!(h.labels(), ["cat", "big dog"]);
        assert!(EmbeddingStore::read_text("2 2\na 1 2\n".as_bytes()).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let s = store(&[
            ("Human face", &[0.1, f64::MIN_POSITIVE]),
            ("Tree", &[1.0 / 3.0, -4.0]),
        ]);
        let mut buf = Vec::new();
        s.write_binary(&mut buf).unwrap();
        assert_eq!(EmbeddingStore::read_binary(buf.as_slice()).unwrap(), s);
        buf.truncate(buf.len() - 3);
        assert!(EmbeddingStore::read_binary(buf.as_slice()).is_err());
    }

    #[test]
    fn csv_export_quotes() {
        let mut buf = Vec::new();
        write_points_csv(
            &mut buf,
            vec![("a,b".to_string(), vec![1.0, -0.5]), ("c".to_string(), vec![2.0])],
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "\"a,b\",1,-0.5\nc,2\n");
    }

    fn arb_store() -> impl Strategy<Value = EmbeddingStore> {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 4..10).prop_map(|rows| {
            let labels = (0..rows.len()).map(|k| format!("l{k}")).collect();
            let data = rows
                .into_iter()
                .flatten()
                .map(|v| if v == 0.0 { 0.5 } else { v })
                .collect();
            EmbeddingStore::new(labels, 4, data).unwrap()
        })
    }

    proptest! {
        #[test]
        fn knn_is_scale_invariant(s in arb_store(), row in 0usize..4, factor in 0.01f64..100.0) {
            let mut data = s.data.clone();
            data[row * 4..row * 4 + 4].iter_mut().for_each(|v| *v *= factor);
            let scaled = EmbeddingStore::new(s.labels.clone(), 4, data).unwrap();
            for q in s.labels() {
                let a: Vec<_> = nearest_neighbors(&s, q, 3, None).unwrap().neighbors.into_iter().map(|n| n.label).collect();
                let b: Vec<_> = nearest_neighbors(&scaled, q, 3, None).unwrap().neighbors.into_iter().map(|n| n.label).collect();
                // ties within rounding may swap; compare after checking distances are well separated
                let d = nearest_neighbors(&s, q, s.len() - 1, None).unwrap();
                let separated = d.neighbors.windows(2).all(|w| (w[1].distance - w[0].distance).abs() > 1e-9);
                if separated {
                    prop_assert_eq!(a, b);
                }
            }
        }

        #[test]
        fn distance_is_symmetric(s in arb_store()) {
            for a in s.labels() {
                for b in s.labels() {
                    prop_assert_eq!(s.similarity(a, b).unwrap(), s.similarity(b, a).unwrap());
                }
            }
        }

        #[test]
        fn projection_is_translation_invariant(s in arb_store(), shift in prop::collection::vec(-3.0f64..3.0, 4)) {
            let moved: Vec<f64> = s.data.chunks(4).flat_map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect::<Vec<_>>()).collect();
            let t = EmbeddingStore::new(s.labels.clone(), 4, moved).unwrap();
            let (l0, l1) = (&s.labels[0], &s.labels[1]);
            let p = project_axis(&s, l0, l1, &[]).unwrap().coordinates;
            let q = project_axis(&t, l0, l1, &[]).unwrap().coordinates;
            let offset = q[0].1 - p[0].1;
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((b.1 - a.1 - offset).abs() < 1e-9);
            }
        }
    }
}
