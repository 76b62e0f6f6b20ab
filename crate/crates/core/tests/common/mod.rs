//! Helpers shared by the integration tests: random instances, a naive metric
//! oracle and a finite-difference gradient checker.
#![allow(dead_code)]

use calm_core::pairs::Pair;
use calm_core::EmbeddingSet;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

pub fn rng(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

pub fn random_unit(rng: &mut SplitMix64, m: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// `n` samples over `t` classes (every class non-empty), each class scattered
/// around its own random centre with a random spread.
pub fn clustered_set(rng: &mut SplitMix64, n: usize, t: usize, m: usize) -> EmbeddingSet {
    assert!(n >= t);
    let centres: Vec<Vec<f64>> = (0..t).map(|_| random_unit(rng, m)).collect();
    let spread: Vec<f64> = (0..t).map(|_| rng.random_range(0.2..1.5)).collect();
    let mut labels: Vec<u32> = (0..t as u32).collect();
    labels.extend((t..n).map(|_| rng.random_range(0..t as u32)));
    let mut data = Vec::with_capacity(n * m);
    for &l in &labels {
        let c = &centres[l as usize];
        for ck in c {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(ck + spread[l as usize] * noise / (m as f64).sqrt());
        }
    }
    EmbeddingSet::from_raw(data, labels, m).unwrap()
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Straightforward re-derivation of the calibration metrics from a pair list:
/// every quantity is recomputed with explicit loops over all pairs.
pub mod oracle {
    use super::*;

    pub struct Metrics {
        pub opis: f64,
        pub epsilon_opis: Vec<f64>,
    }

    fn distance(set: &EmbeddingSet, a: usize, b: usize) -> f64 {
        let mut s = 0.0;
        for k in 0..set.dim() {
            s += set.row(a)[k] * set.row(b)[k];
        }
        let s = s.clamp(-1.0, 1.0);
        (2.0 - 2.0 * s).max(0.0).sqrt()
    }

    fn utility(phi: f64, psi: f64, c: f64) -> f64 {
        if c * c * phi + psi == 0.0 {
            0.0
        } else {
            (1.0 + c * c) * phi * psi / (c * c * phi + psi)
        }
    }

    /// Inverse of the step-interpolated empirical FAR.
    fn far_inverse(sorted: &[f64], level: f64) -> f64 {
        let n = sorted.len();
        let h = level * n as f64;
        if h <= 1.0 {
            return sorted[0];
        }
        let mut k = 1;
        while k < n && (k + 1) as f64 <= h {
            k += 1;
        }
        if k == n {
            return sorted[n - 1];
        }
        sorted[k - 1] + (h - k as f64) * (sorted[k] - sorted[k - 1])
    }

    /// Utility at threshold `d` over the pairs selected by `keep`; `None` if
    /// either side is empty.
    fn curve_point(
        pairs: &[(Pair, f64)],
        keep: &dyn Fn(&Pair) -> bool,
        d: f64,
        c: f64,
    ) -> Option<f64> {
        let (mut pos, mut pos_in, mut neg, mut neg_out) = (0usize, 0usize, 0usize, 0usize);
        for (p, dist) in pairs {
            if !keep(p) {
                continue;
            }
            if p.positive {
                pos += 1;
                if *dist <= d {
                    pos_in += 1;
                }
            } else {
                neg += 1;
                if *dist > d {
                    neg_out += 1;
                }
            }
        }
        if pos == 0 || neg == 0 {
            return None;
        }
        Some(utility(neg_out as f64 / neg as f64, pos_in as f64 / pos as f64, c))
    }

    fn gap(grid: &[f64], a: &[f64], b: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..grid.len() - 1 {
            let lo = (a[i] - b[i]) * (a[i] - b[i]);
            let hi = (a[i + 1] - b[i + 1]) * (a[i + 1] - b[i + 1]);
            total += 0.5 * (grid[i + 1] - grid[i]) * (lo + hi);
        }
        total / (grid[grid.len() - 1] - grid[0])
    }

    /// `None` when the FAR band collapses to a single distance.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        set: &EmbeddingSet,
        pairs: &[Pair],
        far_lo: f64,
        far_hi: f64,
        g: usize,
        c: f64,
        epsilons: &[f64],
    ) -> Option<Metrics> {
        let scored: Vec<(Pair, f64)> = pairs.iter().map(|p| (*p, distance(set, p.a, p.b))).collect();
        let mut negs: Vec<f64> = scored.iter().filter(|(p, _)| !p.positive).map(|x| x.1).collect();
        negs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let d_min = far_inverse(&negs, far_lo);
        let d_max = far_inverse(&negs, far_hi);
        if d_min >= d_max {
            return None;
        }
        let step = (d_max - d_min) / (g - 1) as f64;
        let mut grid: Vec<f64> = (0..g).map(|k| d_min + k as f64 * step).collect();
        grid[g - 1] = d_max;

        let curve = |keep: &dyn Fn(&Pair) -> bool| -> Option<Vec<f64>> {
            grid.iter().map(|&d| curve_point(&scored, keep, d, c)).collect()
        };
        let pooled = curve(&|_| true).expect("pooled curve");
        let mut classes: Vec<u32> = set.labels().to_vec();
        classes.sort();
        classes.dedup();
        let mut per_class: Vec<(u32, Vec<f64>)> = Vec::new();
        for &j in &classes {
            if let Some(cv) = curve(&|p: &Pair| p.anchor == j) {
                per_class.push((j, cv));
            }
        }
        let mut sum = 0.0;
        for (_, cv) in &per_class {
            sum += gap(&grid, cv, &pooled);
        }
        let opis = sum / per_class.len() as f64;

        let t = per_class.len();
        let mut order: Vec<(f64, u32)> = per_class
            .iter()
            .map(|(j, cv)| (cv.iter().sum::<f64>() / cv.len() as f64, *j))
            .collect();
        // best first; equal means keep the lower class id first
        order.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        let mut epsilon_opis = Vec::new();
        for &eps in epsilons {
            let k = ((eps / 100.0 * t as f64).ceil() as usize).min(t);
            let best: Vec<u32> = order[..k].iter().map(|x| x.1).collect();
            let worst: Vec<u32> = order[t - k..].iter().map(|x| x.1).collect();
            let b = curve(&|p: &Pair| best.contains(&p.anchor)).unwrap();
            let w = curve(&|p: &Pair| worst.contains(&p.anchor)).unwrap();
            epsilon_opis.push(gap(&grid, &w, &b));
        }
        Some(Metrics { opis, epsilon_opis })
    }
}

/// Central finite difference of `f` along `dir` at `set`, step `h`. Rows are
/// renormalized after the perturbation, which only affects second order.
pub fn directional_fd(set: &EmbeddingSet, dir: &[f64], h: f64, f: &dyn Fn(&EmbeddingSet) -> f64) -> f64 {
    let shifted = |sign: f64| {
        let data: Vec<f64> = set.as_slice().iter().zip(dir).map(|(x, d)| x + sign * h * d).collect();
        EmbeddingSet::from_raw(data, set.labels().to_vec(), set.dim()).unwrap()
    };
    (f(&shifted(1.0)) - f(&shifted(-1.0))) / (2.0 * h)
}

/// Random direction in the tangent space of every row, scaled to unit length.
pub fn tangent_direction(rng: &mut SplitMix64, set: &EmbeddingSet) -> Vec<f64> {
    let m = set.dim();
    let mut dir: Vec<f64> = (0..set.len() * m).map(|_| rng.sample(StandardNormal)).collect();
    for (d, u) in dir.chunks_exact_mut(m).zip(set.rows()) {
        let r: f64 = d.iter().zip(u).map(|(a, b)| a * b).sum();
        d.iter_mut().zip(u).for_each(|(dk, uk)| *dk -= r * uk);
    }
    let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|x| *x /= n);
    dir
}

pub fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
