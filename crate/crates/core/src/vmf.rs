//! Class compactness from von Mises-Fisher concentration, and the class-adaptive
//! positive margins derived from it.
//!
//! For a class with `n_j` unit embeddings, the mean resultant length is
//! `R = ||sum f_i|| / n_j`. Sra's closed form estimates the concentration as
//! `kappa = R (M - R^2) / (1 - R^2)` in dimension `M`. Concentrations are mapped
//! to a compactness score `z` in `[-1, 1]` relative to a `[kappa_min, kappa_max]`
//! window, then to a weight `w = 1 / (1 + e^z)`; the class margin is
//! `m_j = m+ * w_j / mean(w)`, so compact classes get smaller positive margins
//! while the average margin stays `m+`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CalmError, Result};
use crate::sphere::{norm, EmbeddingSet};

/// Mean resultant lengths at or above `1 - R_BAR_EPS` are singular for the estimator.
pub const R_BAR_EPS: f64 = 1e-9;

pub const DEFAULT_PERCENTILE_LO: f64 = 5.0;
pub const DEFAULT_PERCENTILE_HI: f64 = 95.0;

pub fn estimate_kappa(r_bar: f64, dim: usize) -> Result<f64> {
    if dim < 2 {
        return Err(CalmError::InvalidConfig(format!("dimension {dim} < 2")));
    }
    if !(r_bar >= 0.0) {
        return Err(CalmError::OutOfRange {
            what: "mean resultant length",
            value: r_bar,
            lo: 0.0,
            hi: 1.0,
        });
    }
    if r_bar >= 1.0 - R_BAR_EPS {
        return Err(CalmError::Degenerate { r_bar });
    }
    let r2 = r_bar * r_bar;
    Ok(r_bar * (dim as f64 - r2) / (1.0 - r2))
}

/// Same as [`estimate_kappa`] but clamps `r_bar` just below 1 instead of failing,
/// which caps the estimate near `M / (2 * R_BAR_EPS)`.
pub fn estimate_kappa_clamped(r_bar: f64, dim: usize) -> Result<f64> {
    estimate_kappa(r_bar.min(1.0 - 2.0 * R_BAR_EPS), dim)
}

pub fn compactness_score(kappa: f64, kappa_min: f64, kappa_max: f64) -> Result<f64> {
    if !(kappa_min < kappa_max) {
        return Err(CalmError::InvalidBounds {
            kappa_min,
            kappa_max,
        });
    }
    Ok(((2.0 * kappa - kappa_min - kappa_max) / (kappa_max - kappa_min)).clamp(-1.0, 1.0))
}

pub fn vmf_weight(z: f64) -> f64 {
    1.0 / (1.0 + z.exp())
}

/// `m+ * w_j / mean(w)`. Identical weights give exactly `m+` for every class.
pub fn adaptive_margins(weights: &[f64], m_plus: f64) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(CalmError::EmptyInput("no class weights"));
    }
    if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(CalmError::InvalidConfig("vMF weights must be positive".into()));
    }
    if weights.iter().all(|&w| w == weights[0]) {
        return Ok(vec![m_plus; weights.len()]);
    }
    let mean = weights.iter().sum::<f64>() / weights.len() as f64;
    Ok(weights.iter().map(|&w| m_plus * (w / mean)).collect())
}

/// Linear-interpolated empirical percentile (`p` in `[0, 100]`) of sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Running per-class sums of embeddings, accumulated between refreshes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassMeanTable {
    dim: usize,
    sums: BTreeMap<u32, (Vec<f64>, usize)>,
}

impl ClassMeanTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            sums: BTreeMap::new(),
        }
    }

    /// Adds the given rows of `set`, in the order given.
    pub fn update(&mut self, set: &EmbeddingSet, indices: &[usize]) {
        assert_eq!(set.dim(), self.dim, "embedding dimension changed");
        for &i in indices {
            let (sum, count) = self
                .sums
                .entry(set.label(i))
                .or_insert_with(|| (vec![0.0; self.dim], 0));
            sum.iter_mut().zip(set.row(i)).for_each(|(s, x)| *s += x);
            *count += 1;
        }
    }

    pub fn update_all(&mut self, set: &EmbeddingSet) {
        let all: Vec<usize> = (0..set.len()).collect();
        self.update(set, &all);
    }

    /// Folds another shard into this one, class by class.
    pub fn merge(&mut self, other: &ClassMeanTable) {
        for (class, (sum, count)) in &other.sums {
            let entry = self
                .sums
                .entry(*class)
                .or_insert_with(|| (vec![0.0; self.dim], 0));
            entry.0.iter_mut().zip(sum).for_each(|(s, x)| *s += x);
            entry.1 += count;
        }
    }

    pub fn count(&self, class: u32) -> usize {
        self.sums.get(&class).map_or(0, |e| e.1)
    }

    pub fn mean_resultant_length(&self, class: u32) -> Option<f64> {
        self.sums
            .get(&class)
            .filter(|e| e.1 > 0)
            .map(|(sum, count)| (norm(sum) / *count as f64).min(1.0))
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.sums.keys().copied()
    }

    pub fn reset(&mut self) {
        self.sums.clear();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassVmf {
    pub class: u32,
    pub kappa: f64,
    pub z: f64,
    pub weight: f64,
    pub m_plus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfState {
    pub kappa_min: f64,
    pub kappa_max: f64,
    pub classes: Vec<ClassVmf>,
    /// Classes that kept an earlier margin because they had too few samples.
    pub stale: Vec<u32>,
}

impl VmfState {
    pub fn margins(&self) -> BTreeMap<u32, f64> {
        self.classes.iter().map(|c| (c.class, c.m_plus)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefreshConfig {
    pub m_plus: f64,
    pub percentile_lo: f64,
    pub percentile_hi: f64,
}

impl RefreshConfig {
    pub fn new(m_plus: f64) -> Self {
        Self {
            m_plus,
            percentile_lo: DEFAULT_PERCENTILE_LO,
            percentile_hi: DEFAULT_PERCENTILE_HI,
        }
    }
}

/// Recomputes concentrations, compactness scores, weights and margins from the
/// table, then clears the table for the next epoch.
///
/// Classes with fewer than two samples this epoch keep their margin from
/// `previous` (or `m+` if there is none) and are listed in `stale`. When every
/// class has the same concentration the percentile window is empty; all scores
/// are then 0 and every margin equals `m+`.
pub fn epoch_refresh(
    table: &mut ClassMeanTable,
    cfg: &RefreshConfig,
    previous: Option<&VmfState>,
) -> Result<VmfState> {
    if !(0.0..=100.0).contains(&cfg.percentile_lo)
        || !(0.0..=100.0).contains(&cfg.percentile_hi)
        || cfg.percentile_lo >= cfg.percentile_hi
    {
        return Err(CalmError::InvalidConfig(format!(
            "percentile window [{}, {}] is invalid",
            cfg.percentile_lo, cfg.percentile_hi
        )));
    }
    let mut kappas: Vec<(u32, f64)> = Vec::new();
    let mut stale = Vec::new();
    for class in table.classes() {
        let count = table.count(class);
        if count < 2 {
            log::warn!(
                "{}; keeping previous margin",
                CalmError::InsufficientSamples { class, count }
            );
            stale.push(class);
            continue;
        }
        let r_bar = table.mean_resultant_length(class).unwrap_or(0.0);
        kappas.push((class, estimate_kappa_clamped(r_bar, table.dim)?));
    }
    if kappas.is_empty() {
        return Err(CalmError::InsufficientSamples {
            class: stale.first().copied().unwrap_or(0),
            count: 0,
        });
    }

    let mut sorted: Vec<f64> = kappas.iter().map(|k| k.1).collect();
    sorted.sort_unstable_by(f64::total_cmp);
    let kappa_min = percentile(&sorted, cfg.percentile_lo);
    let kappa_max = percentile(&sorted, cfg.percentile_hi);

    let zs: Vec<f64> = if kappa_min < kappa_max {
        kappas
            .iter()
            .map(|&(_, k)| compactness_score(k, kappa_min, kappa_max))
            .collect::<Result<_>>()?
    } else {
        vec![0.0; kappas.len()]
    };
    let weights: Vec<f64> = zs.iter().map(|&z| vmf_weight(z)).collect();
    let margins = adaptive_margins(&weights, cfg.m_plus)?;

    let mut classes: Vec<ClassVmf> = kappas
        .iter()
        .zip(zs.iter().zip(weights.iter().zip(&margins)))
        .map(|(&(class, kappa), (&z, (&weight, &m_plus)))| ClassVmf {
            class,
            kappa,
            z,
            weight,
            m_plus,
        })
        .collect();

    let earlier = previous.map(VmfState::margins).unwrap_or_default();
    for &class in &stale {
        classes.push(ClassVmf {
            class,
            kappa: f64::NAN,
            z: f64::NAN,
            weight: f64::NAN,
            m_plus: earlier.get(&class).copied().unwrap_or(cfg.m_plus),
        });
    }
    classes.sort_by_key(|c| c.class);
    table.reset();
    Ok(VmfState {
        kappa_min,
        kappa_max,
        classes,
        stale,
    })
}
