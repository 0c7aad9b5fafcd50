//! Annotation ingestion and scene-sentence construction.
//!
//! Each annotated image becomes one "sentence": the labels of its boxes,
//! ordered by box center along a scan axis and mapped to dense vocabulary ids.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, BufRead, Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result, RowError};

/// One labeled, axis-aligned bounding box in normalized image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxAnnotation {
    pub image_id: String,
    pub label: String,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl BoxAnnotation {
    /// Builds a box, rejecting inverted extents and coordinates outside `[0, 1]`.
    pub fn new(
        image_id: impl Into<String>,
        label: impl Into<String>,
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
    ) -> std::result::Result<Self, String> {
        for (name, v) in [
            ("x_min", x_min),
            ("x_max", x_max),
            ("y_min", y_min),
            ("y_max", y_max),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name}={v} outside [0, 1]"));
            }
        }
        if x_min > x_max {
            return Err(format!("inverted x extent ({x_min} > {x_max})"));
        }
        if y_min > y_max {
            return Err(format!("inverted y extent ({y_min} > {y_max})"));
        }
        Ok(BoxAnnotation {
            image_id: image_id.into(),
            label: label.into(),
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }

    pub fn center(&self) -> BoxCenter {
        box_center(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCenter {
    pub cx: f64,
    pub cy: f64,
}

/// Center of an axis-aligned box. The four-corner midpoint collapses to the
/// min/max midpoint because opposite corners share an x or y coordinate.
pub fn box_center(b: &BoxAnnotation) -> BoxCenter {
    BoxCenter {
        cx: (b.x_min + b.x_max) / 2.0,
        cy: (b.y_min + b.y_max) / 2.0,
    }
}

/// CSV column names for the six fields of a box annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    pub image_id: String,
    pub label: String,
    pub x_min: String,
    pub x_max: String,
    pub y_min: String,
    pub y_max: String,
}

impl Default for ColumnMap {
    /// Open Images box-file header names.
    fn default() -> Self {
        ColumnMap {
            image_id: "ImageID".into(),
            label: "LabelName".into(),
            x_min: "XMin".into(),
            x_max: "XMax".into(),
            y_min: "YMin".into(),
            y_max: "YMax".into(),
        }
    }
}

/// Streaming reader over annotation rows. Yields one item per data row; rows
/// that fail to parse or validate come back as [`RowError`]s.
pub struct AnnotationReader<R> {
    records: csv::StringRecordsIntoIter<R>,
    idx: [usize; 6],
}

/// Opens a header-bearing annotation CSV, resolving `columns` against its header.
pub fn parse_annotations<R: Read>(reader: R, columns: &ColumnMap) -> Result<AnnotationReader<R>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Config(format!("annotation CSV has no column {name:?}")))
    };
    let idx = [
        find(&columns.image_id)?,
        find(&columns.label)?,
        find(&columns.x_min)?,
        find(&columns.x_max)?,
        find(&columns.y_min)?,
        find(&columns.y_max)?,
    ];
    Ok(AnnotationReader {
        records: rdr.into_records(),
        idx,
    })
}

impl<R: Read> Iterator for AnnotationReader<R> {
    type Item = std::result::Result<BoxAnnotation, RowError>;

    fn next(&mut self) -> Option<Self::Item> {
        let record = match self.records.next()? {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return Some(Err(RowError {
                    line,
                    message: e.to_string(),
                }));
            }
        };
        let line = record.position().map_or(0, |p| p.line());
        let row_err = |message: String| RowError { line, message };
        let field = |k: usize| {
            record
                .get(self.idx[k])
                .map(str::trim)
                .ok_or_else(|| row_err(format!("missing field {}", self.idx[k] + 1)))
        };
        let coord = |k: usize| -> std::result::Result<f64, RowError> {
            let raw = field(k)?;
            raw.parse::<f64>()
                .map_err(|_| row_err(format!("unparsable coordinate {raw:?}")))
        };
        let parsed = (|| {
            let image_id = field(0)?;
            let label = field(1)?;
            let (x0, x1, y0, y1) = (coord(2)?, coord(3)?, coord(4)?, coord(5)?);
            BoxAnnotation::new(image_id, label, x0, x1, y0, y1).map_err(row_err)
        })();
        Some(parsed)
    }
}

/// Mapping from machine label codes (e.g. Open Images MIDs) to display names.
#[derive(Debug, Clone, Default)]
pub struct ClassNames(HashMap<String, String>);

impl ClassNames {
    /// Reads `code,name` rows. A leading header row is skipped when present.
    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(reader);
        let mut map = HashMap::new();
        for (n, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let (Some(code), Some(name)) = (rec.get(0), rec.get(1)) else {
                return Err(Error::format(
                    "class names",
                    format!("row {} needs two fields", n + 1),
                ));
            };
            if n == 0 && code.trim() == "LabelName" {
                continue;
            }
            map.insert(code.trim().to_string(), name.trim().to_string());
        }
        Ok(ClassNames(map))
    }

    pub fn resolve<'a>(&'a self, code: &'a str) -> &'a str {
        self.0.get(code).map_or(code, String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<(String, String)> for ClassNames {
    fn from_iter<I: IntoIterator<Item = (String, String)>>(iter: I) -> Self {
        ClassNames(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanAxis {
    #[default]
    Horizontal,
    Vertical,
}

impl FromStr for ScanAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "horizontal" | "h" => Ok(ScanAxis::Horizontal),
            "vertical" | "v" => Ok(ScanAxis::Vertical),
            other => Err(Error::Config(format!("unknown scan axis {other:?}"))),
        }
    }
}

impl fmt::Display for ScanAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScanAxis::Horizontal => "horizontal",
            ScanAxis::Vertical => "vertical",
        })
    }
}

/// Dense label ids of one image, in scan order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSentence {
    pub image_id: String,
    pub tokens: Vec<u32>,
}

impl SceneSentence {
    pub fn new(image_id: impl Into<String>, tokens: Vec<u32>) -> Self {
        SceneSentence {
            image_id: image_id.into(),
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Bidirectional label/id map. Ids are dense, assigned by descending count
/// with ties broken by label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    labels: Vec<String>,
    counts: Vec<u64>,
    min_count: u64,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Keeps labels whose count reaches `min_count`.
    pub fn from_counts<I, S>(counts: I, min_count: u64) -> Result<Self>
    where
        I: IntoIterator<Item = (S, u64)>,
        S: Into<String>,
    {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let mut merged: HashMap<String, u64> = HashMap::new();
        for (label, c) in counts {
            *merged.entry(label.into()).or_default() += c;
        }
        let mut kept: Vec<(String, u64)> = merged.into_iter().filter(|&(_, c)| c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_sorted(kept, min_count))
    }

    fn from_sorted(entries: Vec<(String, u64)>, min_count: u64) -> Self {
        let (labels, counts): (Vec<String>, Vec<u64>) = entries.into_iter().unzip();
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i as u32))
            .collect();
        Vocabulary {
            labels,
            counts,
            min_count,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn id(&self, label: &str) -> Option<u32> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: u32) -> Option<&str> {
        self.labels.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Writes `label<TAB>count` lines in id order.
    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (l, c) in self.labels.iter().zip(&self.counts) {
            writeln!(w, "{l}\t{c}")?;
        }
        w.flush()
    }

    /// Reads a file written by [`Vocabulary::write`]; line order fixes the ids.
    /// The threshold is taken to be the smallest stored count.
    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::format("vocabulary", e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let (label, count) = line.rsplit_once('\t').ok_or_else(|| {
                Error::format("vocabulary", format!("line {}: expected label<TAB>count", n + 1))
            })?;
            let count: u64 = count
                .trim()
                .parse()
                .map_err(|_| Error::format("vocabulary", format!("line {}: bad count {count:?}", n + 1)))?;
            entries.push((label.to_string(), count));
        }
        let min_count = entries.iter().map(|e| e.1).min().unwrap_or(1).max(1);
        let vocab = Self::from_sorted(entries, min_count);
        if vocab.index.len() != vocab.labels.len() {
            return Err(Error::format("vocabulary", "duplicate label"));
        }
        Ok(vocab)
    }
}

/// Counts raw label occurrences and builds the filtered vocabulary.
pub fn build_vocabulary<I, S>(labels: I, min_count: u64) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts: HashMap<String, u64> = HashMap::new();
    for l in labels {
        let l = l.as_ref();
        match counts.get_mut(l) {
            Some(c) => *c += 1,
            None => {
                counts.insert(l.to_string(), 1);
            }
        }
    }
    Vocabulary::from_counts(counts, min_count)
}

/// Orders one image's boxes along `axis` and maps their labels to ids.
///
/// Ties on the scan coordinate fall back to the other coordinate, then to the
/// label id. Labels missing from `vocab` are dropped.
pub fn scan_image(
    image_id: &str,
    boxes: &[BoxAnnotation],
    axis: ScanAxis,
    vocab: &Vocabulary,
) -> SceneSentence {
    let mut keyed: Vec<(f64, f64, u32)> = boxes
        .iter()
        .filter_map(|b| {
            let id = vocab.id(&b.label)?;
            let c = box_center(b);
            Some(match axis {
                ScanAxis::Horizontal => (c.cx, c.cy, id),
                ScanAxis::Vertical => (c.cy, c.cx, id),
            })
        })
        .collect();
    keyed.sort_by(|a, b| {
        cmp_f64(a.0, b.0)
            .then_with(|| cmp_f64(a.1, b.1))
            .then_with(|| a.2.cmp(&b.2))
    });
    SceneSentence::new(image_id, keyed.into_iter().map(|k| k.2).collect())
}

fn cmp_f64(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PreprocessStats {
    pub images: usize,
    pub boxes: usize,
    pub classes: usize,
    pub retained_classes: usize,
    pub retained_boxes: u64,
    pub emitted_sentences: usize,
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub sentences: Vec<SceneSentence>,
    pub vocab: Vocabulary,
    pub stats: PreprocessStats,
}

/// Groups boxes by image, builds the vocabulary over all box labels (after
/// optional name resolution) and scans every image into a sentence.
///
/// Sentences come out sorted by image id. Images with no retained labels are
/// not emitted.
pub fn preprocess<I>(
    boxes: I,
    names: Option<&ClassNames>,
    axis: ScanAxis,
    min_count: u64,
) -> Result<Preprocessed>
where
    I: IntoIterator<Item = BoxAnnotation>,
{
    let mut by_image: BTreeMap<String, Vec<BoxAnnotation>> = BTreeMap::new();
    let mut n_boxes = 0;
    for mut b in boxes {
        if let Some(names) = names {
            let resolved = names.resolve(&b.label);
            if resolved != b.label {
                b.label = resolved.to_string();
            }
        }
        n_boxes += 1;
        match by_image.get_mut(&b.image_id) {
            Some(v) => v.push(b),
            None => {
                by_image.insert(b.image_id.clone(), vec![b]);
            }
        }
    }

    let mut raw_counts: HashMap<&str, u64> = HashMap::new();
    for b in by_image.values().flatten() {
        *raw_counts.entry(b.label.as_str()).or_default() += 1;
    }
    let classes = raw_counts.len();
    let vocab = Vocabulary::from_counts(raw_counts, min_count)?;

    let sentences: Vec<SceneSentence> = by_image
        .iter()
        .map(|(id, bs)| scan_image(id, bs, axis, &vocab))
        .filter(|s| !s.is_empty())
        .collect();

    let stats = PreprocessStats {
        images: by_image.len(),
        boxes: n_boxes,
        classes,
        retained_classes: vocab.len(),
        retained_boxes: vocab.counts().iter().sum(),
        emitted_sentences: sentences.len(),
    };
    Ok(Preprocessed {
        sentences,
        vocab,
        stats,
    })
}

/// Writes `image_id<TAB>id id ...` lines.
pub fn write_sentences<W: Write>(mut w: W, sentences: &[SceneSentence]) -> io::Result<()> {
    for s in sentences {
        write!(w, "{}\t", s.image_id)?;
        for (k, t) in s.tokens.iter().enumerate() {
            if k > 0 {
                w.write_all(b" ")?;
            }
            write!(w, "{t}")?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_sentences<R: BufRead>(r: R) -> Result<Vec<SceneSentence>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::format("sentences", e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let (image_id, rest) = line.split_once('\t').ok_or_else(|| {
            Error::format("sentences", format!("line {}: expected image_id<TAB>ids", n + 1))
        })?;
        let tokens = rest
            .split_ascii_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| Error::format("sentences", format!("line {}: bad label id {t:?}", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(SceneSentence::new(image_id, tokens));
    }
    Ok(out)
}
