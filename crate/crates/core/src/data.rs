//! Seeded hypersphere class mixtures and verification pair sets.
//!
//! Samples are `normalize(center + sigma * z)` with `z` standard normal, a
//! Gaussian-perturb-then-normalize stand-in for von Mises-Fisher sampling.
//! All randomness comes from ChaCha8 seeded with `SphereMixtureSpec::seed`; centers and
//! sample noise use separate streams, so sets that differ only in `sigma`
//! share their centers.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ScoredPairs;
use crate::format::fmt9;
use crate::geometry::{dot, norm, EmbeddingBatch, Matrix, MIN_NORM};

const CENTER_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;
const PAIR_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SphereMixtureSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// 2-D only: centers at exactly uniform polar angles `2 pi k / C`.
    pub uniform_centers: bool,
}

impl Default for SphereMixtureSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            dim: 2,
            samples_per_class: 100,
            noise_sigma: 0.3,
            seed: 0,
            uniform_centers: true,
        }
    }
}

impl SphereMixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDataSpec(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.dim < 2 {
            return bad(format!("dim must be at least 2, got {}", self.dim));
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if self.uniform_centers && self.dim != 2 {
            return bad(format!("uniform_centers needs dim = 2, got {}", self.dim));
        }
        Ok(())
    }
}

fn gaussian_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > MIN_NORM {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Class centers of `spec`, one unit row per class.
pub fn centers(spec: &SphereMixtureSpec) -> Result<Matrix> {
    spec.validate()?;
    let c = spec.num_classes;
    let mut m = Matrix::zeros(c, spec.dim);
    if spec.uniform_centers {
        for k in 0..c {
            let phi = std::f64::consts::TAU * k as f64 / c as f64;
            m.row_mut(k).copy_from_slice(&[phi.cos(), phi.sin()]);
        }
    } else {
        let mut rng = stream(spec.seed, CENTER_STREAM);
        for k in 0..c {
            m.row_mut(k).copy_from_slice(&gaussian_direction(&mut rng, spec.dim));
        }
    }
    Ok(m)
}

/// Samples the mixture. Rows are grouped by class (class 0 first).
pub fn generate(spec: &SphereMixtureSpec) -> Result<EmbeddingBatch> {
    generate_split(spec, 0)
}

/// Independent draw number `split` from the same centers; split 0 is
/// [`generate`]. Used for held-out evaluation sets.
pub fn generate_split(spec: &SphereMixtureSpec, split: u64) -> Result<EmbeddingBatch> {
    let centers = centers(spec)?;
    let mut rng = stream(spec.seed, SAMPLE_STREAM + 16 * split);
    let n = spec.num_classes * spec.samples_per_class;
    let mut raw = Matrix::zeros(n, spec.dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.num_classes {
        for k in 0..spec.samples_per_class {
            let i = c * spec.samples_per_class + k;
            loop {
                let v: Vec<f64> = centers
                    .row(c)
                    .iter()
                    .map(|&x| x + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                if norm(&v) > MIN_NORM {
                    raw.row_mut(i).copy_from_slice(&v);
                    break;
                }
            }
            labels.push(c);
        }
    }
    if spec.noise_sigma == 0.0 {
        // Centers are already unit rows; skip renormalization so samples
        // equal them bitwise.
        return EmbeddingBatch::from_unit_rows(raw, labels);
    }
    EmbeddingBatch::new(&raw, labels, spec.num_classes)
}

/// One verification pair, by row index into its batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub idx_a: usize,
    pub idx_b: usize,
    pub same: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
}

impl PairSet {
    /// Cosine score of every pair, split by kind.
    pub fn scores(&self, batch: &EmbeddingBatch) -> Result<ScoredPairs> {
        let e = batch.embeddings();
        let mut genuine = Vec::new();
        let mut impostor = Vec::new();
        for p in &self.pairs {
            if p.idx_a >= e.rows() || p.idx_b >= e.rows() {
                return Err(Error::LengthMismatch { left: p.idx_a.max(p.idx_b), right: e.rows() });
            }
            let s = dot(e.row(p.idx_a), e.row(p.idx_b));
            if p.same {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
        ScoredPairs::new(genuine, impostor)
    }

    /// `(score, same)` in pair order, for fold-based evaluation.
    pub fn labeled_scores(&self, batch: &EmbeddingBatch) -> Vec<(f64, bool)> {
        let e = batch.embeddings();
        self.pairs.iter().map(|p| (dot(e.row(p.idx_a), e.row(p.idx_b)), p.same)).collect()
    }
}

/// Draws `pairs_per_kind` genuine and as many impostor pairs, alternating
/// genuine and impostor. Every class in `0..num_classes` needs two samples.
pub fn make_pairs(batch: &EmbeddingBatch, pairs_per_kind: usize, seed: u64) -> Result<PairSet> {
    let classes = batch.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in batch.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    if let Some((class, members)) = by_class.iter().enumerate().find(|(_, m)| m.len() < 2) {
        return Err(Error::InsufficientSamples { class, count: members.len() });
    }
    if classes < 2 {
        return Err(Error::InvalidDataSpec("impostor pairs need at least 2 classes".into()));
    }
    let mut rng = stream(seed, PAIR_STREAM);
    let mut pairs = Vec::with_capacity(2 * pairs_per_kind);
    for _ in 0..pairs_per_kind {
        let c = rng.random_range(0..classes);
        let members = &by_class[c];
        let a = rng.random_range(0..members.len());
        let mut b = rng.random_range(0..members.len() - 1);
        if b >= a {
            b += 1;
        }
        pairs.push(Pair { idx_a: members[a], idx_b: members[b], same: true });

        let ca = rng.random_range(0..classes);
        let mut cb = rng.random_range(0..classes - 1);
        if cb >= ca {
            cb += 1;
        }
        let a = by_class[ca][rng.random_range(0..by_class[ca].len())];
        let b = by_class[cb][rng.random_range(0..by_class[cb].len())];
        pairs.push(Pair { idx_a: a, idx_b: b, same: false });
    }
    Ok(PairSet { pairs })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.display().to_string(), source }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        if let csv::ErrorKind::Io(io) = e.into_kind() {
            return Error::Io { path: path.display().to_string(), source: io };
        }
        unreachable!("checked io error kind");
    }
    Error::Format { path: path.display().to_string(), message: e.to_string() }
}

pub(crate) fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), message: message.into() }
}

/// Writes `label, v0..v{d-1}`.
pub fn write_dataset(path: &Path, batch: &EmbeddingBatch) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["label".to_string()];
    header.extend((0..batch.dim()).map(|k| format!("v{k}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (row, &l) in batch.embeddings().iter_rows().zip(batch.labels()) {
        let mut rec = vec![l.to_string()];
        rec.extend(row.iter().map(|&v| fmt9(v)));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a dataset CSV; rows are re-normalized on load.
pub fn read_dataset(path: &Path) -> Result<EmbeddingBatch> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let dim = header.len().saturating_sub(1);
    let expected: Vec<String> =
        std::iter::once("label".to_string()).chain((0..dim).map(|k| format!("v{k}"))).collect();
    if dim < 2 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(format_err(path, "expected header label,v0,..,v{d-1} with d >= 2"));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let at = |msg: &str| format_err(path, format!("record {}: {msg}", line + 1));
        labels.push(rec[0].trim().parse::<usize>().map_err(|_| at("bad label"))?);
        for field in rec.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| at("bad value"))?;
            if !v.is_finite() {
                return Err(at("non-finite value"));
            }
            values.push(v);
        }
    }
    if labels.is_empty() {
        return Err(format_err(path, "no records"));
    }
    let raw = Matrix::from_vec(labels.len(), dim, values)?;
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    EmbeddingBatch::new(&raw, labels, classes)
}

/// Writes `idx_a, idx_b, same` with `same` as 0/1.
pub fn write_pairs(path: &Path, pairs: &PairSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["idx_a", "idx_b", "same"]).map_err(|e| csv_err(path, e))?;
    for p in &pairs.pairs {
        w.write_record([p.idx_a.to_string(), p.idx_b.to_string(), (p.same as u8).to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_pairs(path: &Path) -> Result<PairSet> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(["idx_a", "idx_b", "same"]) {
        return Err(format_err(path, "expected header idx_a,idx_b,same"));
    }
    let mut pairs = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let at = |msg: &str| format_err(path, format!("record {}: {msg}", line + 1));
        let idx = |k: usize| rec[k].trim().parse::<usize>().map_err(|_| at("bad index"));
        let same = match rec[2].trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            _ => return Err(at("same must be 0 or 1")),
        };
        pairs.push(Pair { idx_a: idx(0)?, idx_b: idx(1)?, same });
    }
    Ok(PairSet { pairs })
}
