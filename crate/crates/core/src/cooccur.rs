//! Windowed co-occurrence accumulation over scene sentences.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::SceneSentence;
use crate::error::{Error, Result};

/// How a pair at token distance `d` contributes to its cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightingMode {
    /// Every pair counts 1.
    #[default]
    Unit,
    /// A pair counts `1/d`.
    Harmonic,
}

impl WeightingMode {
    fn weight(self, distance: usize) -> f64 {
        match self {
            WeightingMode::Unit => 1.0,
            WeightingMode::Harmonic => 1.0 / distance as f64,
        }
    }

    fn tag(self) -> u8 {
        match self {
            WeightingMode::Unit => 0,
            WeightingMode::Harmonic => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(WeightingMode::Unit),
            1 => Some(WeightingMode::Harmonic),
            _ => None,
        }
    }
}

impl FromStr for WeightingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unit" => Ok(WeightingMode::Unit),
            "harmonic" => Ok(WeightingMode::Harmonic),
            other => Err(Error::Config(format!("unknown weighting mode {other:?}"))),
        }
    }
}

impl fmt::Display for WeightingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightingMode::Unit => "unit",
            WeightingMode::Harmonic => "harmonic",
        })
    }
}

/// One stored cell of the table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CooccurRecord {
    pub i: u32,
    pub j: u32,
    pub weight: f64,
}

/// Sparse symmetric co-occurrence table. Both `(i, j)` and `(j, i)` are
/// stored, and every stored weight is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurTable {
    entries: BTreeMap<(u32, u32), f64>,
    vocab_size: usize,
    window: usize,
    mode: WeightingMode,
}

impl CooccurTable {
    pub fn new(vocab_size: usize, window: usize, mode: WeightingMode) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("window size must be at least 1".into()));
        }
        if vocab_size > u32::MAX as usize {
            return Err(Error::Config("vocabulary too large for u32 ids".into()));
        }
        Ok(CooccurTable {
            entries: BTreeMap::new(),
            vocab_size,
            window,
            mode,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn mode(&self) -> WeightingMode {
        self.mode
    }

    /// Number of stored cells, counting `(i, j)` and `(j, i)` separately.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: u32, j: u32) -> f64 {
        self.entries.get(&(i, j)).copied().unwrap_or(0.0)
    }

    /// Stored cells in `(i, j)` order.
    pub fn records(&self) -> impl Iterator<Item = CooccurRecord> + '_ {
        self.entries
            .iter()
            .map(|(&(i, j), &weight)| CooccurRecord { i, j, weight })
    }

    /// Adds every in-window pair of one sentence. Windows never cross sentences.
    pub fn add_sentence(&mut self, tokens: &[u32]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Data(format!(
                "label id {bad} out of range for vocabulary of size {}",
                self.vocab_size
            )));
        }
        for (p, &a) in tokens.iter().enumerate() {
            for (dist, &b) in tokens[p + 1..].iter().take(self.window).enumerate() {
                let w = self.mode.weight(dist + 1);
                *self.entries.entry((a, b)).or_insert(0.0) += w;
                if a != b {
                    *self.entries.entry((b, a)).or_insert(0.0) += w;
                } else {
                    // same-class pair: the symmetric write lands on the same cell
                    *self.entries.get_mut(&(a, a)).unwrap() += w;
                }
            }
        }
        Ok(())
    }

    /// Entrywise sum. Both tables must share vocabulary size, window and mode.
    pub fn merge(&mut self, other: &CooccurTable) -> Result<()> {
        if (self.vocab_size, self.window, self.mode) != (other.vocab_size, other.window, other.mode) {
            return Err(Error::Data(
                "cannot merge tables with different shape or settings".into(),
            ));
        }
        for (&k, &w) in &other.entries {
            *self.entries.entry(k).or_insert(0.0) += w;
        }
        Ok(())
    }

    /// Row sum `X_i = sum_k X_ik`.
    pub fn marginal(&self, i: u32) -> f64 {
        self.entries.range((i, 0)..=(i, u32::MAX)).map(|(_, &w)| w).sum()
    }

    /// Writes `i j weight` lines; weights print in shortest round-trip form.
    pub fn write_text<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in self.records() {
            writeln!(w, "{} {} {}", r.i, r.j, r.weight)?;
        }
        w.flush()
    }

    fn insert_record(&mut self, r: CooccurRecord, what: &str) -> Result<()> {
        if r.i as usize >= self.vocab_size || r.j as usize >= self.vocab_size {
            return Err(Error::format(
                what,
                format!("record ({}, {}) out of range", r.i, r.j),
            ));
        }
        if !(r.weight > 0.0 && r.weight.is_finite()) {
            return Err(Error::format(what, format!("non-positive weight {}", r.weight)));
        }
        *self.entries.entry((r.i, r.j)).or_insert(0.0) += r.weight;
        Ok(())
    }
}

/// Builds the table for a corpus. With `threads > 1` sentences are split into
/// contiguous chunks whose private tables are merged in chunk order.
pub fn accumulate(
    sentences: &[SceneSentence],
    vocab_size: usize,
    window: usize,
    mode: WeightingMode,
    threads: usize,
) -> Result<CooccurTable> {
    let mut table = CooccurTable::new(vocab_size, window, mode)?;
    if threads <= 1 || sentences.len() < 2 * threads {
        for s in sentences {
            table.add_sentence(&s.tokens)?;
        }
        return Ok(table);
    }
    let chunk = sentences.len().div_ceil(threads);
    let partials: Vec<Result<CooccurTable>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sentences
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    let mut t = CooccurTable::new(vocab_size, window, mode)?;
                    for s in part {
                        t.add_sentence(&s.tokens)?;
                    }
                    Ok(t)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("accumulate worker panicked"))
            .collect()
    });
    for p in partials {
        table.merge(&p?)?;
    }
    Ok(table)
}

const SHARD_MAGIC: &[u8; 8] = b"SCNCOOC1";
const SHARD_HEADER_LEN: usize = 8 + 8 + 8 + 1 + 4 + 4 + 8;
const RECORD_LEN: usize = 16;

fn shard_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("shard-{index:05}.bin"))
}

/// Writes the table as numbered shard files in `dir`, at most
/// `records_per_shard` records each, in `(i, j)` order.
///
/// Shard layout (little-endian): magic `SCNCOOC1`, u64 vocab size, u64 window,
/// u8 mode, u32 shard index, u32 shard count, u64 record count, then records of
/// `(u32 i, u32 j, f64 weight)`. An empty table is one header-only shard.
pub fn save_shards(table: &CooccurTable, dir: &Path, records_per_shard: usize) -> Result<Vec<PathBuf>> {
    let per = records_per_shard.max(1);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records: Vec<CooccurRecord> = table.records().collect();
    let count = records.len().div_ceil(per).max(1);
    let mut paths = Vec::with_capacity(count);
    for index in 0..count {
        let part = records
            .get(index * per..((index + 1) * per).min(records.len()))
            .unwrap_or(&[]);
        let path = shard_path(dir, index);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let write = |w: &mut BufWriter<fs::File>| -> io::Result<()> {
            w.write_all(SHARD_MAGIC)?;
            w.write_all(&(table.vocab_size as u64).to_le_bytes())?;
            w.write_all(&(table.window as u64).to_le_bytes())?;
            w.write_all(&[table.mode.tag()])?;
            w.write_all(&(index as u32).to_le_bytes())?;
            w.write_all(&(count as u32).to_le_bytes())?;
            w.write_all(&(part.len() as u64).to_le_bytes())?;
            for r in part {
                w.write_all(&r.i.to_le_bytes())?;
                w.write_all(&r.j.to_le_bytes())?;
                w.write_all(&r.weight.to_le_bytes())?;
            }
            w.flush()
        };
        write(&mut w).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    // drop stale shards from an earlier, larger save
    let mut stale = count;
    while shard_path(dir, stale).exists() {
        let p = shard_path(dir, stale);
        fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        stale += 1;
    }
    Ok(paths)
}

struct ShardHeader {
    vocab_size: usize,
    window: usize,
    mode: WeightingMode,
    index: u32,
    count: u32,
    records: u64,
}

fn read_header(bytes: &[u8], name: &str) -> Result<ShardHeader> {
    if bytes.len() < SHARD_HEADER_LEN || &bytes[..8] != SHARD_MAGIC {
        return Err(Error::format(name, "bad shard magic or truncated header"));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let mode = WeightingMode::from_tag(bytes[24])
        .ok_or_else(|| Error::format(name, format!("unknown weighting mode tag {}", bytes[24])))?;
    Ok(ShardHeader {
        vocab_size: u64_at(8) as usize,
        window: u64_at(16) as usize,
        mode,
        index: u32_at(25),
        count: u32_at(29),
        records: u64_at(33),
    })
}

/// Loads every shard in `dir` and merges them into one table.
pub fn load_shards(dir: &Path) -> Result<CooccurTable> {
    let first = shard_path(dir, 0);
    if !first.exists() {
        return Err(Error::io(
            &first,
            io::Error::new(io::ErrorKind::NotFound, "no shard files found"),
        ));
    }
    let mut table: Option<CooccurTable> = None;
    let mut expected = 1u32;
    let mut index = 0u32;
    while index < expected {
        let path = shard_path(dir, index as usize);
        let name = path.display().to_string();
        let mut bytes = Vec::new();
        fs::File::open(&path)
            .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
            .map_err(|e| Error::io(&path, e))?;
        let h = read_header(&bytes, &name)?;
        if h.index != index {
            return Err(Error::format(
                &name,
                format!("shard index {} != {index}", h.index),
            ));
        }
        let body = &bytes[SHARD_HEADER_LEN..];
        if body.len() as u64 != h.records * RECORD_LEN as u64 {
            return Err(Error::format(&name, "record count does not match file length"));
        }
        let t = match &mut table {
            None => {
                expected = h.count;
                table.insert(CooccurTable::new(h.vocab_size, h.window, h.mode)?)
            }
            Some(t) => {
                if (t.vocab_size, t.window, t.mode, expected) != (h.vocab_size, h.window, h.mode, h.count) {
                    return Err(Error::format(&name, "header disagrees with shard 0"));
                }
                t
            }
        };
        for rec in body.chunks_exact(RECORD_LEN) {
            let r = CooccurRecord {
                i: u32::from_le_bytes(rec[0..4].try_into().unwrap()),
                j: u32::from_le_bytes(rec[4..8].try_into().unwrap()),
                weight: f64::from_le_bytes(rec[8..16].try_into().unwrap()),
            };
            t.insert_record(r, &name)?;
        }
        index += 1;
    }
    let table = table.expect("at least one shard read");
    if table.records().any(|r| table.get(r.j, r.i) != r.weight) {
        return Err(Error::format(
            dir.display().to_string(),
            "loaded table is not symmetric",
        ));
    }
    Ok(table)
}
