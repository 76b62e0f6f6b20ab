//! Threshold-calibration metrics.
//!
//! A distance threshold `d` accepts a pair when its L2 distance is `<= d`. For a
//! set of scored pairs this yields a sensitivity `psi(d)` (accepted positives)
//! and a specificity `phi(d)` (rejected negatives), combined into a utility
//! `U(d)` by a weighted harmonic mean. OPIS measures how far each class's utility
//! curve strays from the pooled curve over a calibration range `[d_min, d_max]`;
//! epsilon-OPIS measures the gap between the best and worst epsilon% of classes.
//!
//! Integrals over the calibration range use the composite trapezoid rule on the
//! curve grid.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CalmError, Result};
use crate::pairs::ScoredPairSet;
use crate::sphere::{dot, EmbeddingSet};

pub const DEFAULT_GRID: usize = 512;
pub const DEFAULT_C: f64 = 1.0;

/// Harmonic-mean utility of specificity `phi` and sensitivity `psi`, trading one
/// unit of `phi` for `c` units of `psi`. Defined as 0 when both rates are 0.
pub fn utility(phi: f64, psi: f64, c: f64) -> f64 {
    let c2 = c * c;
    let den = c2 * phi + psi;
    if den <= 0.0 {
        return 0.0;
    }
    (1.0 + c2) * phi * psi / den
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub specificity: f64,
    pub sensitivity: f64,
}

impl Rates {
    pub fn utility(&self, c: f64) -> f64 {
        utility(self.specificity, self.sensitivity, c)
    }
}

/// Sorted positive and negative distances of one owner (class, group or pool).
#[derive(Debug, Clone, Default)]
pub struct DistanceProfile {
    positives: Vec<f64>,
    negatives: Vec<f64>,
}

impl DistanceProfile {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a crate::pairs::ScoredPair>) -> Self {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for p in pairs {
            if p.pair.positive {
                positives.push(p.distance);
            } else {
                negatives.push(p.distance);
            }
        }
        positives.sort_unstable_by(f64::total_cmp);
        negatives.sort_unstable_by(f64::total_cmp);
        Self {
            positives,
            negatives,
        }
    }

    pub fn for_owner(scored: &ScoredPairSet, owner: CurveOwner) -> Self {
        match owner {
            CurveOwner::Pooled => Self::from_pairs(scored.entries()),
            CurveOwner::Class(j) => Self::from_pairs(scored.anchored_at(j)),
        }
    }

    fn check(&self, owner: &str) -> Result<()> {
        if self.positives.is_empty() || self.negatives.is_empty() {
            return Err(CalmError::InsufficientPairs {
                owner: owner.to_string(),
                positives: self.positives.len(),
                negatives: self.negatives.len(),
            });
        }
        Ok(())
    }

    /// Rates at threshold `d`. Callers must ensure both sides are non-empty.
    fn rates_at(&self, d: f64) -> Rates {
        let accepted_pos = self.positives.partition_point(|&x| x <= d);
        let accepted_neg = self.negatives.partition_point(|&x| x <= d);
        Rates {
            sensitivity: accepted_pos as f64 / self.positives.len() as f64,
            specificity: (self.negatives.len() - accepted_neg) as f64 / self.negatives.len() as f64,
        }
    }
}

/// Specificity and sensitivity of class `class` at threshold `d`, using the
/// class's positive pairs and the negatives anchored at it.
pub fn class_rates(scored: &ScoredPairSet, class: u32, d: f64) -> Result<Rates> {
    let profile = DistanceProfile::for_owner(scored, CurveOwner::Class(class));
    profile.check(&CurveOwner::Class(class).to_string())?;
    Ok(profile.rates_at(d))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRange {
    pub d_min: f64,
    pub d_max: f64,
    pub far_lo: f64,
    pub far_hi: f64,
}

impl CalibrationRange {
    pub fn width(&self) -> f64 {
        self.d_max - self.d_min
    }
}

/// Distance at which the empirical false-accept rate reaches `level`.
///
/// With sorted negative distances `x_1 <= ... <= x_n`, `FAR(x_k) = k / n`; the
/// inverse is interpolated linearly between order statistics and clamped to
/// `x_1` below `1 / n`.
fn far_quantile(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    let h = level * n as f64;
    if h <= 1.0 {
        return sorted[0];
    }
    if h >= n as f64 {
        return sorted[n - 1];
    }
    let lower = h.floor();
    let k = lower as usize; // 1-based rank of the lower order statistic
    let frac = h - lower;
    sorted[k - 1] + frac * (sorted[k] - sorted[k - 1])
}

/// Maps a false-accept-rate band `[far_lo, far_hi]` over all negative pairs to a
/// distance range.
pub fn calibration_range_from_far(
    scored: &ScoredPairSet,
    far_lo: f64,
    far_hi: f64,
) -> Result<CalibrationRange> {
    if !(far_lo > 0.0 && far_lo < far_hi && far_hi <= 1.0) {
        return Err(CalmError::InvalidConfig(format!(
            "FAR band must satisfy 0 < far_lo < far_hi <= 1, got [{far_lo}, {far_hi}]"
        )));
    }
    let mut negatives: Vec<f64> = scored.negatives().map(|p| p.distance).collect();
    if negatives.is_empty() {
        return Err(CalmError::InsufficientPairs {
            owner: "pooled".into(),
            positives: scored.positives().count(),
            negatives: 0,
        });
    }
    negatives.sort_unstable_by(f64::total_cmp);
    let recommended = (1.0 / far_lo).ceil() as usize;
    if negatives.len() < recommended {
        log::warn!(
            "{} negative pairs; at least {recommended} recommended for FAR {far_lo}",
            negatives.len()
        );
    }
    let d_min = far_quantile(&negatives, far_lo);
    let d_max = far_quantile(&negatives, far_hi);
    if !(d_min < d_max) {
        return Err(CalmError::DegenerateRange { d_min, d_max });
    }
    Ok(CalibrationRange {
        d_min,
        d_max,
        far_lo,
        far_hi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CurveOwner {
    Class(u32),
    Pooled,
}

impl std::fmt::Display for CurveOwner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CurveOwner::Class(j) => write!(f, "class {j}"),
            CurveOwner::Pooled => write!(f, "pooled"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilityCurve {
    pub owner: CurveOwner,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl UtilityCurve {
    pub fn mean_value(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// `g` uniformly spaced distances from `d_min` to `d_max` inclusive.
pub fn distance_grid(range: &CalibrationRange, g: usize) -> Result<Vec<f64>> {
    if g < 2 {
        return Err(CalmError::InvalidConfig(format!("grid size {g} < 2")));
    }
    let step = range.width() / (g - 1) as f64;
    let mut grid: Vec<f64> = (0..g).map(|k| range.d_min + k as f64 * step).collect();
    grid[g - 1] = range.d_max;
    Ok(grid)
}

fn curve_from_profile(
    profile: &DistanceProfile,
    owner: CurveOwner,
    grid: &[f64],
    c: f64,
) -> Result<UtilityCurve> {
    profile.check(&owner.to_string())?;
    let values = grid.iter().map(|&d| profile.rates_at(d).utility(c)).collect();
    Ok(UtilityCurve {
        owner,
        grid: grid.to_vec(),
        values,
    })
}

pub fn utility_curve(
    scored: &ScoredPairSet,
    owner: CurveOwner,
    range: &CalibrationRange,
    g: usize,
    c: f64,
) -> Result<UtilityCurve> {
    let grid = distance_grid(range, g)?;
    curve_from_profile(&DistanceProfile::for_owner(scored, owner), owner, &grid, c)
}

/// Per-class curves for every anchor class in `scored`, computed in parallel and
/// returned in ascending class order. Classes lacking positives or negatives are
/// reported separately instead of failing the whole computation.
pub fn class_curves(
    scored: &ScoredPairSet,
    range: &CalibrationRange,
    g: usize,
    c: f64,
) -> Result<(Vec<UtilityCurve>, Vec<u32>)> {
    let grid = distance_grid(range, g)?;
    let results: Vec<(u32, Result<UtilityCurve>)> = scored
        .anchor_classes()
        .into_par_iter()
        .map(|j| {
            let owner = CurveOwner::Class(j);
            (j, curve_from_profile(&DistanceProfile::for_owner(scored, owner), owner, &grid, c))
        })
        .collect();
    let mut curves = Vec::new();
    let mut excluded = Vec::new();
    for (j, r) in results {
        match r {
            Ok(curve) => curves.push(curve),
            Err(CalmError::InsufficientPairs { .. }) => {
                log::warn!("class {j} lacks positive or negative pairs; excluded from OPIS");
                excluded.push(j);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((curves, excluded))
}

/// `∫ (a(d) - b(d))^2 dd / (d_max - d_min)` by the trapezoid rule on the shared grid.
pub fn mean_squared_gap(a: &UtilityCurve, b: &UtilityCurve) -> Result<f64> {
    if a.grid != b.grid || a.values.len() != a.grid.len() || b.values.len() != b.grid.len() {
        return Err(CalmError::GridMismatch);
    }
    let g = &a.grid;
    let width = g[g.len() - 1] - g[0];
    if !(width > 0.0) {
        return Err(CalmError::GridMismatch);
    }
    let sq: Vec<f64> = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .collect();
    let integral: f64 = g
        .windows(2)
        .zip(sq.windows(2))
        .map(|(d, f)| 0.5 * (d[1] - d[0]) * (f[0] + f[1]))
        .sum();
    Ok(integral / width)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassContribution {
    pub class: u32,
    pub contribution: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonOpis {
    pub epsilon: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpisReport {
    pub opis: f64,
    pub per_class: Vec<ClassContribution>,
    pub epsilon_opis: Vec<EpsilonOpis>,
}

/// Weighted mean over classes of the mean squared deviation of each class curve
/// from the pooled curve. `weights` defaults to 1 per class.
pub fn opis(
    curves: &[UtilityCurve],
    pooled: &UtilityCurve,
    weights: Option<&[f64]>,
) -> Result<OpisReport> {
    if curves.is_empty() {
        return Err(CalmError::EmptyInput("no class curves"));
    }
    if let Some(w) = weights {
        if w.len() != curves.len() {
            return Err(CalmError::DimensionMismatch {
                expected: curves.len(),
                found: w.len(),
            });
        }
        if w.iter().any(|&x| !(x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(CalmError::InvalidConfig("class weights must be non-negative with a positive sum".into()));
        }
    }
    let mut per_class = Vec::with_capacity(curves.len());
    let mut weighted = 0.0;
    let mut total_weight = 0.0;
    for (i, curve) in curves.iter().enumerate() {
        let contribution = mean_squared_gap(curve, pooled)?;
        let weight = weights.map_or(1.0, |w| w[i]);
        weighted += weight * contribution;
        total_weight += weight;
        let class = match curve.owner {
            CurveOwner::Class(j) => j,
            CurveOwner::Pooled => u32::MAX,
        };
        per_class.push(ClassContribution {
            class,
            contribution,
            weight,
        });
    }
    Ok(OpisReport {
        opis: weighted / total_weight,
        per_class,
        epsilon_opis: Vec::new(),
    })
}

/// Number of classes in each epsilon group: `ceil(epsilon / 100 * T)`.
pub fn epsilon_group_size(epsilon: f64, classes: usize) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon <= 100.0) {
        return Err(CalmError::OutOfRange {
            what: "epsilon percentile",
            value: epsilon,
            lo: 0.0,
            hi: 100.0,
        });
    }
    let k = ((epsilon / 100.0) * classes as f64).ceil() as usize;
    if k == 0 {
        return Err(CalmError::EmptyGroup { epsilon, classes });
    }
    Ok(k.min(classes))
}

/// Utility gap between the pooled best-epsilon% and worst-epsilon% classes.
///
/// Classes are ranked by their mean utility over the grid (ties broken by class
/// id). Each group's curve is computed from all pairs anchored at its classes.
pub fn epsilon_opis(
    scored: &ScoredPairSet,
    curves: &[UtilityCurve],
    epsilon: f64,
    c: f64,
) -> Result<f64> {
    let k = epsilon_group_size(epsilon, curves.len())?;
    let grid = &curves[0].grid;
    if curves.iter().any(|cv| &cv.grid != grid) {
        return Err(CalmError::GridMismatch);
    }
    let mut ranked: Vec<(f64, u32)> = curves
        .iter()
        .map(|cv| match cv.owner {
            CurveOwner::Class(j) => Ok((cv.mean_value(), j)),
            CurveOwner::Pooled => Err(CalmError::InvalidConfig("pooled curve among class curves".into())),
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let mut best: Vec<u32> = ranked[..k].iter().map(|r| r.1).collect();
    let mut worst: Vec<u32> = ranked[ranked.len() - k..].iter().map(|r| r.1).collect();
    best.sort_unstable();
    worst.sort_unstable();

    let group_curve = |members: &[u32]| {
        let profile = DistanceProfile::from_pairs(
            scored
                .entries()
                .iter()
                .filter(|p| members.binary_search(&p.pair.anchor).is_ok()),
        );
        curve_from_profile(&profile, CurveOwner::Pooled, grid, c)
    };
    let best_curve = group_curve(&best)?;
    let worst_curve = group_curve(&worst)?;
    mean_squared_gap(&worst_curve, &best_curve)
}

/// Fraction of samples whose `k` nearest neighbours (by cosine, the sample itself
/// excluded, ties broken by lower index) contain a sample of the same class.
pub fn recall_at_k(set: &EmbeddingSet, k: usize) -> Result<f64> {
    Ok(recall_at_ks(set, &[k])?[0])
}

/// Recall at several `k` values with one neighbour scan per query.
pub fn recall_at_ks(set: &EmbeddingSet, ks: &[usize]) -> Result<Vec<f64>> {
    let n = set.len();
    let k_max = ks.iter().copied().max().unwrap_or(0);
    if ks.iter().any(|&k| k == 0 || k >= n) {
        return Err(CalmError::InvalidConfig(format!(
            "recall@k needs 1 <= k < N = {n}, got {ks:?}"
        )));
    }
    let neighbour_order = |x: &(f64, usize), y: &(f64, usize)| -> Ordering {
        y.0.total_cmp(&x.0).then(x.1.cmp(&y.1))
    };
    // For each query: rank (1-based) of its first same-class neighbour, if within k_max.
    let first_hit: Vec<Option<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let q = set.row(i);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dot(q, set.row(j)), j))
                .collect();
            if k_max < cand.len() {
                cand.select_nth_unstable_by(k_max - 1, neighbour_order);
                cand.truncate(k_max);
            }
            cand.sort_unstable_by(neighbour_order);
            cand.iter()
                .position(|&(_, j)| set.label(j) == set.label(i))
                .map(|p| p + 1)
        })
        .collect();
    Ok(ks
        .iter()
        .map(|&k| first_hit.iter().filter(|h| matches!(h, Some(r) if *r <= k)).count() as f64 / n as f64)
        .collect())
}
