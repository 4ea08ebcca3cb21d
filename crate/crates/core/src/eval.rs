//! Verification metrics (pair accuracy, TAR@FAR, k-fold accuracy, Rank-1)
//! and Board-Count model selection.

use std::path::Path;

use serde::Serialize;

use crate::data::{csv_err, format_err};
use crate::error::{Error, Result};
use crate::format::fmt9;
use crate::geometry::{dot, EmbeddingBatch};

/// Cosine scores of genuine (same identity) and impostor pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredPairs {
    genuine: Vec<f64>,
    impostor: Vec<f64>,
}

impl ScoredPairs {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Result<Self> {
        if genuine.iter().chain(&impostor).any(|s| !s.is_finite()) {
            return Err(Error::NonFiniteValue("score"));
        }
        Ok(Self { genuine, impostor })
    }

    pub fn from_labeled(scores: &[(f64, bool)]) -> Result<Self> {
        let genuine = scores.iter().filter(|p| p.1).map(|p| p.0).collect();
        let impostor = scores.iter().filter(|p| !p.1).map(|p| p.0).collect();
        Self::new(genuine, impostor)
    }

    pub fn genuine(&self) -> &[f64] {
        &self.genuine
    }

    pub fn impostor(&self) -> &[f64] {
        &self.impostor
    }

    fn require_both(&self) -> Result<()> {
        if self.genuine.is_empty() {
            return Err(Error::EmptyScores("genuine"));
        }
        if self.impostor.is_empty() {
            return Err(Error::EmptyScores("impostor"));
        }
        Ok(())
    }
}

/// Midpoint strictly above `lo` and at most `hi`.
fn cut_between(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid > lo {
        mid
    } else {
        hi
    }
}

/// Best verification accuracy over thresholds at `-inf`, `+inf` and every
/// midpoint between adjacent distinct scores. A pair is accepted when its
/// score is `>= tau`. Returns `(accuracy, tau)`, smallest `tau` on ties.
pub fn pair_accuracy(pairs: &ScoredPairs) -> Result<(f64, f64)> {
    pairs.require_both()?;
    let mut all: Vec<(f64, bool)> = pairs
        .genuine
        .iter()
        .map(|&s| (s, true))
        .chain(pairs.impostor.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = all.len() as f64;

    // Everything accepted.
    let mut correct = pairs.genuine.len();
    let mut best = (correct as f64 / total, f64::NEG_INFINITY);
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            // Moving this score below the threshold.
            if all[i].1 {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
        let tau = if i < all.len() { cut_between(v, all[i].0) } else { f64::INFINITY };
        let acc = correct as f64 / total;
        if acc > best.0 {
            best = (acc, tau);
        }
    }
    Ok(best)
}

/// Largest impostor count whose fraction stays within `far`.
fn allowed_impostors(n: usize, far: f64) -> usize {
    let mut k = ((far * n as f64).floor() as usize).min(n);
    while k < n && (k + 1) as f64 / n as f64 <= far {
        k += 1;
    }
    while k > 0 && k as f64 / n as f64 > far {
        k -= 1;
    }
    k
}

/// TAR at the smallest threshold whose impostor acceptance fraction is at
/// most `far`, together with that threshold. With `k` impostors allowed the
/// threshold sits just above the `(k+1)`-th largest impostor score.
pub fn tar_at_far_with_threshold(pairs: &ScoredPairs, far: f64) -> Result<(f64, f64)> {
    if !(far > 0.0 && far <= 1.0) {
        return Err(Error::FarOutOfRange(far));
    }
    pairs.require_both()?;
    let n = pairs.impostor.len();
    let k = allowed_impostors(n, far);
    if k >= n {
        return Ok((1.0, f64::NEG_INFINITY));
    }
    let mut imp = pairs.impostor.clone();
    imp.sort_by(|a, b| b.total_cmp(a));
    let v = imp[k];
    let accepted = pairs.genuine.iter().filter(|&&g| g > v).count();
    Ok((accepted as f64 / pairs.genuine.len() as f64, v.next_up()))
}

pub fn tar_at_far(pairs: &ScoredPairs, far: f64) -> Result<f64> {
    tar_at_far_with_threshold(pairs, far).map(|r| r.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KFoldReport {
    pub mean_accuracy: f64,
    pub fold_accuracy: Vec<f64>,
    pub thresholds: Vec<f64>,
}

/// LFW-style k-fold accuracy: the threshold chosen on the other folds is
/// applied to each held-out contiguous slice.
pub fn kfold_accuracy(scores: &[(f64, bool)], folds: usize) -> Result<KFoldReport> {
    let n = scores.len();
    if folds < 2 || folds > n {
        return Err(Error::InvalidDataSpec(format!("need 2 <= folds <= {n}, got {folds}")));
    }
    let bound = |f: usize| f * n / folds;
    let mut fold_accuracy = Vec::with_capacity(folds);
    let mut thresholds = Vec::with_capacity(folds);
    for f in 0..folds {
        let (lo, hi) = (bound(f), bound(f + 1));
        let train: Vec<(f64, bool)> = scores[..lo].iter().chain(&scores[hi..]).copied().collect();
        let (_, tau) = pair_accuracy(&ScoredPairs::from_labeled(&train)?)?;
        let test = &scores[lo..hi];
        let correct = test.iter().filter(|&&(s, same)| (s >= tau) == same).count();
        fold_accuracy.push(correct as f64 / test.len() as f64);
        thresholds.push(tau);
    }
    let mean_accuracy = fold_accuracy.iter().sum::<f64>() / folds as f64;
    Ok(KFoldReport { mean_accuracy, fold_accuracy, thresholds })
}

/// Fraction of probes whose nearest gallery row (max cosine, lowest index
/// on ties) carries the probe's label.
pub fn rank1(probes: &EmbeddingBatch, gallery: &EmbeddingBatch) -> Result<f64> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if probes.dim() != gallery.dim() {
        return Err(Error::DimensionMismatch { expected: gallery.dim(), found: probes.dim() });
    }
    if let Some(&l) = probes.labels().iter().find(|l| !gallery.labels().contains(l)) {
        return Err(Error::MissingLabel(l));
    }
    if probes.is_empty() {
        return Err(Error::EmptyScores("probes"));
    }
    let g = gallery.embeddings();
    let mut hits = 0;
    for (p, &label) in probes.embeddings().iter_rows().zip(probes.labels()) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (k, row) in g.iter_rows().enumerate() {
            let s = dot(p, row);
            if s > best.0 {
                best = (s, k);
            }
        }
        if gallery.labels()[best.1] == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

/// Configurations (rows) by benchmarks (columns), accuracies in percent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyTable {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl AccuracyTable {
    pub fn new(row_labels: Vec<String>, col_labels: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let bad = |m: String| Err(Error::MalformedTable(m));
        if values.len() != row_labels.len() {
            return bad(format!("{} rows but {} row labels", values.len(), row_labels.len()));
        }
        if col_labels.is_empty() {
            return bad("no benchmark columns".into());
        }
        for (r, row) in values.iter().enumerate() {
            if row.len() != col_labels.len() {
                return bad(format!("row {r} has {} cells, expected {}", row.len(), col_labels.len()));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
                return bad(format!("row {r}: accuracy {v} outside [0, 100]"));
            }
        }
        Ok(Self { row_labels, col_labels, values })
    }

    /// CSV with the benchmark names on the first line and the configuration
    /// name in the first column.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
        let col_labels: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
        let mut row_labels = Vec::new();
        let mut values = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            row_labels.push(rec[0].trim().to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| format_err(path, format!("record {}: bad accuracy", line + 1)))?;
            values.push(row);
        }
        Self::new(row_labels, col_labels, values)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = std::iter::once("config").chain(self.col_labels.iter().map(String::as_str));
        w.write_record(header).map_err(|e| csv_err(path, e))?;
        for (label, row) in self.row_labels.iter().zip(&self.values) {
            let rec = std::iter::once(label.clone()).chain(row.iter().map(|&v| fmt9(v)));
            w.write_record(rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|source| Error::Io { path: path.display().to_string(), source })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BoardCount {
    pub bc: Vec<Vec<usize>>,
    pub row_sums: Vec<usize>,
    pub best_row: usize,
}

/// Per column, `BC = 1 + #rows with strictly lower accuracy` (competition
/// ranking, ties share the lower rank). The best row maximizes the BC sum,
/// lowest index on ties.
pub fn board_count(table: &AccuracyTable) -> Result<BoardCount> {
    let rows = table.values.len();
    if rows < 2 {
        return Err(Error::MalformedTable(format!("board count needs at least 2 rows, got {rows}")));
    }
    let cols = table.col_labels.len();
    let mut bc = vec![vec![0; cols]; rows];
    for c in 0..cols {
        for r in 0..rows {
            let v = table.values[r][c];
            bc[r][c] = 1 + (0..rows).filter(|&o| table.values[o][c] < v).count();
        }
    }
    let row_sums: Vec<usize> = bc.iter().map(|r| r.iter().sum()).collect();
    let mut best_row = 0;
    for (r, &s) in row_sums.iter().enumerate() {
        if s > row_sums[best_row] {
            best_row = r;
        }
    }
    Ok(BoardCount { bc, row_sums, best_row })
}

#[derive(Debug, Clone, Serialize)]
pub struct BoardCountSummary<'a> {
    pub best_row: usize,
    pub best_label: &'a str,
    pub row_labels: &'a [String],
    pub row_sums: &'a [usize],
}

impl BoardCount {
    pub fn summary<'a>(&'a self, table: &'a AccuracyTable) -> BoardCountSummary<'a> {
        BoardCountSummary {
            best_row: self.best_row,
            best_label: &table.row_labels[self.best_row],
            row_labels: &table.row_labels,
            row_sums: &self.row_sums,
        }
    }

    /// Same layout as the accuracy table plus a `bc_sum` column.
    pub fn write_csv(&self, table: &AccuracyTable, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = std::iter::once("config")
            .chain(table.col_labels.iter().map(String::as_str))
            .chain(std::iter::once("bc_sum"));
        w.write_record(header).map_err(|e| csv_err(path, e))?;
        for ((label, row), sum) in table.row_labels.iter().zip(&self.bc).zip(&self.row_sums) {
            let rec = std::iter::once(label.clone())
                .chain(row.iter().map(usize::to_string))
                .chain(std::iter::once(sum.to_string()));
            w.write_record(rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|source| Error::Io { path: path.display().to_string(), source })
    }
}
