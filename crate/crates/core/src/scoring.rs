//! Per-example coreset scores.
//!
//! Every epoch each example contributes exactly one positive-pair cosine
//! similarity; the score `m[k]` is the running sum of the negated values. A
//! high score means the example's two views stayed dissimilar throughout
//! training. The ranking sorts by descending score, so `a[0]` is the hardest
//! example and `a[..L]` is the coreset.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::LossMode;
use crate::error::{Error, Result};

/// Where a score table came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub loss_mode: Option<LossMode>,
    pub config_hash: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    m: Vec<f64>,
    epochs_seen: u32,
    pub provenance: Provenance,
}

impl ScoreTable {
    pub fn new(n: usize, provenance: Provenance) -> Self {
        Self {
            m: vec![0.0; n],
            epochs_seen: 0,
            provenance,
        }
    }

    pub fn from_parts(m: Vec<f64>, epochs_seen: u32, provenance: Provenance) -> Self {
        Self {
            m,
            epochs_seen,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.m
    }

    pub fn epochs_seen(&self) -> u32 {
        self.epochs_seen
    }

    /// Commit one epoch of positive-pair similarities. The stream must cover
    /// every example exactly once; nothing is modified unless it does.
    pub fn accumulate(&mut self, pair_cossims: &[(usize, f64)]) -> Result<()> {
        let n = self.m.len();
        if pair_cossims.len() != n {
            return Err(Error::Protocol(format!(
                "epoch delivered {} similarities for {n} examples",
                pair_cossims.len()
            )));
        }
        let mut seen = vec![false; n];
        for &(k, c) in pair_cossims {
            if k >= n {
                return Err(Error::Protocol(format!("example index {k} outside [0, {n})")));
            }
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::Protocol(format!("example {k} appears twice in one epoch")));
            }
            if !(c.abs() <= 1.0 + 1e-9) {
                return Err(Error::Numeric(format!("cossim {c} for example {k} outside [-1, 1]")));
            }
        }
        for &(k, c) in pair_cossims {
            self.m[k] -= c;
        }
        self.epochs_seen += 1;
        Ok(())
    }

    /// Average positive-pair cossim per example, `-m[k] / epochs_seen`.
    pub fn mean_cossim(&self) -> Result<Vec<f64>> {
        if self.epochs_seen == 0 {
            return Err(Error::State("no epoch has been accumulated".into()));
        }
        let e = self.epochs_seen as f64;
        Ok(self.m.iter().map(|&v| -v / e).collect())
    }

    pub fn rank(&self) -> Result<CoresetRanking> {
        if self.epochs_seen == 0 {
            return Err(Error::State("cannot rank before the first epoch".into()));
        }
        Ok(CoresetRanking::from_scores(self.m.clone()))
    }
}

/// Example indices ordered by descending score, ties by ascending index.
#[derive(Debug, Clone, PartialEq)]
pub struct CoresetRanking {
    order: Vec<usize>,
    scores: Vec<f64>,
}

impl CoresetRanking {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Self { order, scores }
    }

    /// A ranking given directly as an order (e.g. read back from disk).
    pub fn from_order(order: Vec<usize>, scores: Vec<f64>) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &k in &order {
            if k >= n || std::mem::replace(&mut seen[k], true) {
                return Err(Error::Data(format!("ranking is not a permutation of [0, {n})")));
            }
        }
        if scores.len() != n {
            return Err(Error::Data(format!("{} scores for {n} ranked examples", scores.len())));
        }
        Ok(Self { order, scores })
    }

    /// Identity order with zero scores.
    pub fn identity(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            scores: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Score snapshot indexed by example.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// `a[stride .. stride + size]`.
    pub fn select(&self, size: usize, stride: usize) -> Result<&[usize]> {
        let end = stride
            .checked_add(size)
            .filter(|&e| e <= self.order.len())
            .ok_or_else(|| {
                Error::Bounds(format!(
                    "slice [{stride}, {stride} + {size}) exceeds ranking of {}",
                    self.order.len()
                ))
            })?;
        Ok(&self.order[stride..end])
    }
}

/// Fractional subset size: nearest integer, at least one.
pub fn fraction_to_size(fraction: f64, n: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("subset fraction {fraction} outside (0, 1]")));
    }
    Ok(((fraction * n as f64).round() as usize).clamp(1, n.max(1)))
}

pub const SCORE_MAGIC: &[u8; 4] = b"CSCR";
pub const SCORE_VERSION: u32 = 1;

/// Little-endian: magic, version u32, N u64, epochs u32, N f64, 32-byte hash.
pub fn encode_scores(table: &ScoreTable) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * table.len() + 32);
    out.extend_from_slice(SCORE_MAGIC);
    out.extend_from_slice(&SCORE_VERSION.to_le_bytes());
    out.extend_from_slice(&(table.len() as u64).to_le_bytes());
    out.extend_from_slice(&table.epochs_seen.to_le_bytes());
    for v in &table.m {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&table.provenance.config_hash);
    out
}

pub fn decode_scores(bytes: &[u8]) -> Result<ScoreTable> {
    if bytes.len() < 20 {
        return Err(Error::format("header", "score checkpoint shorter than its header"));
    }
    if &bytes[0..4] != SCORE_MAGIC {
        return Err(Error::format("magic", "expected CSCR"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != SCORE_VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let epochs = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
    let expected = n
        .checked_mul(8)
        .and_then(|v| v.checked_add(20 + 32))
        .ok_or_else(|| Error::format("n", "example count overflows"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            "payload",
            format!("{} bytes for {n} scores, expected {expected}", bytes.len()),
        ));
    }
    let m = bytes[20..20 + 8 * n]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut hash = [0u8; 32];
    hash.copy_from_slice(&bytes[20 + 8 * n..]);
    Ok(ScoreTable::from_parts(
        m,
        epochs,
        Provenance {
            seed: 0,
            loss_mode: None,
            config_hash: hash,
        },
    ))
}

/// Write via a temporary file and rename, so a reader never sees a torn file.
pub fn save_scores(path: &Path, table: &ScoreTable) -> Result<()> {
    write_atomic(path, &encode_scores(table))
}

pub fn load_scores(path: &Path) -> Result<ScoreTable> {
    decode_scores(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// One row of the per-epoch cossim log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CossimRecord {
    pub epoch: u32,
    pub example_index: usize,
    pub cossim: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path.display().to_string(), e.to_string())
}

/// Append one epoch to the log (header written when the file is new).
/// Rows are ordered by example index.
pub fn append_cossim_log(path: &Path, epoch: u32, pair_cossims: &[(usize, f64)]) -> Result<()> {
    let fresh = !path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    let mut rows = pair_cossims.to_vec();
    rows.sort_by_key(|&(k, _)| k);
    for (example_index, cossim) in rows {
        w.serialize(CossimRecord {
            epoch,
            example_index,
            cossim,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_cossim_log(path: &Path) -> Result<Vec<CossimRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Drop log rows from epochs `>= keep_epochs` (used when resuming).
pub fn truncate_cossim_log(path: &Path, keep_epochs: u32) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let rows = read_cossim_log(path)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.iter().all(|r| r.epoch >= keep_epochs) {
        w.write_record(["epoch", "example_index", "cossim"])
            .map_err(|e| csv_err(path, e))?;
    }
    for row in rows.into_iter().filter(|r| r.epoch < keep_epochs) {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Ranking export: `[method,]rank,example_index,score,mean_cossim`.
pub fn write_ranking_csv(
    path: &Path,
    ranking: &CoresetRanking,
    mean_cossim: Option<&[f64]>,
    method: Option<&str>,
) -> Result<()> {
    let mut out = Vec::new();
    let head = if method.is_some() { "method," } else { "" };
    writeln!(out, "{head}rank,example_index,score,mean_cossim").expect("in-memory write");
    for (rank, &k) in ranking.order().iter().enumerate() {
        let mc = mean_cossim.map(|m| m[k].to_string()).unwrap_or_default();
        let prefix = method.map(|m| format!("{m},")).unwrap_or_default();
        writeln!(out, "{prefix}{rank},{k},{},{mc}", ranking.scores()[k]).expect("in-memory write");
    }
    write_atomic(path, &out)
}

/// Read a ranking export (with or without a method column).
pub fn read_ranking_csv(path: &Path) -> Result<CoresetRanking> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(path.display().to_string(), format!("missing column {name}")))
    };
    let (rank_col, idx_col, score_col) = (col("rank")?, col("example_index")?, col("score")?);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let field = |c: usize, name: &str| -> Result<&str> {
            rec.get(c)
                .ok_or_else(|| Error::format(name.to_string(), "missing field"))
        };
        let parse_err = |name: &str, v: &str| Error::format(name.to_string(), format!("cannot parse {v:?}"));
        let rank: usize = field(rank_col, "rank")?.parse().map_err(|_| parse_err("rank", &rec[rank_col]))?;
        let k: usize = field(idx_col, "example_index")?
            .parse()
            .map_err(|_| parse_err("example_index", &rec[idx_col]))?;
        let s: f64 = field(score_col, "score")?.parse().map_err(|_| parse_err("score", &rec[score_col]))?;
        rows.push((rank, k, s));
    }
    rows.sort_by_key(|r| r.0);
    if rows.iter().enumerate().any(|(i, r)| r.0 != i) {
        return Err(Error::format("rank", "ranks are not 0..N"));
    }
    let mut scores = vec![0.0; rows.len()];
    for &(_, k, s) in &rows {
        if k < scores.len() {
            scores[k] = s;
        }
    }
    CoresetRanking::from_order(rows.into_iter().map(|r| r.1).collect(), scores)
}

/// Newline-delimited example indices.
pub fn write_subset(path: &Path, indices: &[usize]) -> Result<()> {
    let mut out = Vec::new();
    for k in indices {
        writeln!(out, "{k}").expect("in-memory write");
    }
    write_atomic(path, &out)
}

pub fn read_subset(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(no, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::format(format!("{} line {}", path.display(), no + 1), format!("not an index: {l:?}")))
        })
        .collect()
}
