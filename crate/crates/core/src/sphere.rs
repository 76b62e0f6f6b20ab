//! Vector primitives on the unit hypersphere.
//!
//! On the unit sphere cosine similarity `s` and L2 distance `d` are two views of
//! the same quantity: `d = sqrt(2 - 2s)`, `s = 1 - d^2 / 2`. Distances therefore
//! live in `[0, 2]`, which is the widest possible calibration range.

use std::collections::BTreeMap;

use crate::error::{CalmError, Result};

/// Norms at or below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Tolerance on the unit-norm invariant of [`EmbeddingSet`] rows.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Rows whose norm is this close to 1 are left untouched by normalization, which
/// makes it a fixed point after the first application.
const UNIT_FIXED_POINT: f64 = 64.0 * f64::EPSILON;

/// Slack accepted on domain boundaries of the cosine/distance conversions.
const DOMAIN_TOL: f64 = 1e-9;

#[inline]
pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Returns `v / ||v||`.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    normalize_in_place(&mut out)?;
    Ok(out)
}

pub fn normalize_in_place(v: &mut [f64]) -> Result<()> {
    let n = norm(v);
    if !(n > ZERO_NORM) {
        return Err(CalmError::ZeroVector { norm: n });
    }
    if (n - 1.0).abs() <= UNIT_FIXED_POINT {
        return Ok(());
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(CalmError::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    Ok(dot(u, v).clamp(-1.0, 1.0))
}

pub fn cos_to_l2(s: f64) -> Result<f64> {
    if !(-1.0 - DOMAIN_TOL..=1.0 + DOMAIN_TOL).contains(&s) {
        return Err(CalmError::OutOfRange {
            what: "cosine similarity",
            value: s,
            lo: -1.0,
            hi: 1.0,
        });
    }
    Ok(distance_from_cosine(s))
}

pub fn l2_to_cos(d: f64) -> Result<f64> {
    if !(-DOMAIN_TOL..=2.0 + DOMAIN_TOL).contains(&d) {
        return Err(CalmError::OutOfRange {
            what: "L2 distance",
            value: d,
            lo: 0.0,
            hi: 2.0,
        });
    }
    let d = d.clamp(0.0, 2.0);
    Ok(1.0 - 0.5 * d * d)
}

/// Infallible conversion for similarities produced internally; clamps first.
#[inline]
pub fn distance_from_cosine(s: f64) -> f64 {
    (2.0 - 2.0 * s.clamp(-1.0, 1.0)).max(0.0).sqrt()
}

/// `N` labeled unit vectors of dimension `M`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    data: Vec<f64>,
    labels: Vec<u32>,
    dim: usize,
}

impl EmbeddingSet {
    /// Builds a set from rows that must already be unit-norm (within 1e-9).
    pub fn new(data: Vec<f64>, labels: Vec<u32>, dim: usize) -> Result<Self> {
        Self::check_shape(&data, &labels, dim)?;
        for (i, row) in data.chunks_exact(dim).enumerate() {
            let n = norm(row);
            if !((n - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(CalmError::InvalidEmbeddingSet(format!(
                    "row {i} has norm {n}, expected 1"
                )));
            }
        }
        Ok(Self { data, labels, dim })
    }

    /// Builds a set from raw rows, normalizing each one.
    pub fn from_raw(mut data: Vec<f64>, labels: Vec<u32>, dim: usize) -> Result<Self> {
        Self::check_shape(&data, &labels, dim)?;
        for row in data.chunks_exact_mut(dim) {
            normalize_in_place(row)?;
        }
        Ok(Self { data, labels, dim })
    }

    fn check_shape(data: &[f64], labels: &[u32], dim: usize) -> Result<()> {
        if dim < 2 {
            return Err(CalmError::InvalidEmbeddingSet(format!(
                "dimension {dim} < 2"
            )));
        }
        if labels.is_empty() {
            return Err(CalmError::InvalidEmbeddingSet("no samples".into()));
        }
        if data.len() != labels.len() * dim {
            return Err(CalmError::DimensionMismatch {
                expected: labels.len() * dim,
                found: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(CalmError::InvalidEmbeddingSet("non-finite value".into()));
        }
        Ok(())
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

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Cosine similarity between samples `i` and `j`.
    #[inline]
    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        dot(self.row(i), self.row(j)).clamp(-1.0, 1.0)
    }

    /// Sorted distinct class ids.
    pub fn classes(&self) -> Vec<u32> {
        self.class_members().into_keys().collect()
    }

    /// Sample indices per class, in ascending index order.
    pub fn class_members(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            members.entry(l).or_default().push(i);
        }
        members
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(CalmError::IndexOutOfRange {
                    index: i,
                    len: self.len(),
                });
            }
            data.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Ok(Self {
            data,
            labels,
            dim: self.dim,
        })
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<u32>, usize) {
        (self.data, self.labels, self.dim)
    }
}
