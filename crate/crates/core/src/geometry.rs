//! Unit-sphere geometry shared by every loss variant: row-major matrices,
//! L2 normalization, cosine and angle kernels, and angles between class
//! centers.
//!
//! Class centers are stored as the rows of a `C x d` matrix.

use crate::error::{Error, Result};

/// Cosines are kept inside `[-1 + COS_CLAMP, 1 - COS_CLAMP]` before any arccos.
pub const COS_CLAMP: f64 = 1e-7;

/// Norms below this are treated as zero.
pub const MIN_NORM: f64 = 1e-12;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch { left: data.len(), right: rows * cols });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch { expected: cols, found: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] += v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Copy of the listed rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), cols: self.cols, data }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn clamp_cos(c: f64) -> f64 {
    c.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
}

/// True when `c` lies strictly inside the clamp band, i.e. the clamp has a
/// unit derivative.
pub fn inside_clamp(c: f64) -> bool {
    c > -1.0 + COS_CLAMP && c < 1.0 - COS_CLAMP
}

/// `d/dc arccos(clamp(c))`; zero where the clamp is active.
pub fn d_arccos(c: f64) -> f64 {
    if inside_clamp(c) {
        -1.0 / (1.0 - c * c).sqrt()
    } else {
        0.0
    }
}

/// An L2-normalized vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitEmbedding(Vec<f64>);

impl UnitEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// `v / |v|`. Fails with [`Error::ZeroVector`] when `|v| < 1e-12`.
pub fn normalize(v: &[f64]) -> Result<UnitEmbedding> {
    let n = norm(v);
    if !(n >= MIN_NORM) {
        return Err(Error::ZeroVector { norm: n });
    }
    Ok(UnitEmbedding(v.iter().map(|x| x / n).collect()))
}

fn normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let u = normalize(m.row(i))?;
        out.row_mut(i).copy_from_slice(u.as_slice());
    }
    Ok(out)
}

/// Normalized embeddings (rows) with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    embeddings: Matrix,
    labels: Vec<usize>,
}

impl EmbeddingBatch {
    /// Normalizes every row of `raw`; labels are checked against `num_classes`.
    pub fn new(raw: &Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if raw.rows() != labels.len() {
            return Err(Error::LengthMismatch { left: raw.rows(), right: labels.len() });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, classes: num_classes });
        }
        Ok(Self { embeddings: normalize_rows(raw)?, labels })
    }

    /// Wraps rows the caller has already normalized.
    pub(crate) fn from_unit_rows(embeddings: Matrix, labels: Vec<usize>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::LengthMismatch { left: embeddings.rows(), right: labels.len() });
        }
        Ok(Self { embeddings, labels })
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            embeddings: self.embeddings.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Last-layer class centers, one unit-norm row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(Matrix);

impl ClassWeights {
    pub fn new(raw: &Matrix) -> Result<Self> {
        Ok(Self(normalize_rows(raw)?))
    }

    /// Wraps rows that are already unit-norm.
    pub(crate) fn from_normalized(m: Matrix) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }
}

/// Entry `(i, j)` is `<x_i, W_j>`, clamped into the arccos-safe band.
pub fn cosine_matrix(batch: &EmbeddingBatch, weights: &ClassWeights) -> Result<Matrix> {
    Ok(raw_cosines(batch.embeddings(), weights.matrix())?.map(clamp_cos))
}

/// Unclamped row-by-row inner products of two matrices sharing `d`.
pub(crate) fn raw_cosines(x: &Matrix, w: &Matrix) -> Result<Matrix> {
    if x.cols() != w.cols() {
        return Err(Error::DimensionMismatch { expected: w.cols(), found: x.cols() });
    }
    let mut out = Matrix::zeros(x.rows(), w.rows());
    for i in 0..x.rows() {
        let xi = x.row(i);
        for j in 0..w.rows() {
            out.set(i, j, dot(xi, w.row(j)));
        }
    }
    Ok(out)
}

/// Element-wise arccos of a (clamped) cosine matrix.
pub fn angles(cosines: &Matrix) -> Matrix {
    cosines.map(|c| clamp_cos(c).acos())
}

/// `C x C` matrix of angles between class centers; symmetric with zero diagonal.
pub fn inter_class_angles(weights: &ClassWeights) -> Result<Matrix> {
    let w = weights.matrix();
    let c = w.rows();
    if c < 2 {
        return Err(Error::DimensionMismatch { expected: 2, found: c });
    }
    let mut out = Matrix::zeros(c, c);
    for a in 0..c {
        for b in (a + 1)..c {
            let angle = clamp_cos(dot(w.row(a), w.row(b))).acos();
            out.set(a, b, angle);
            out.set(b, a, angle);
        }
    }
    Ok(out)
}
