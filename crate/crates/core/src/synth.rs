//! Synthetic labeled embeddings drawn from von Mises-Fisher mixtures.
//!
//! Samples use Wood's (1994) rejection scheme: the component `w = mu . x` is drawn
//! from its exact marginal by rejection against a Beta envelope, with
//!
//! ```text
//! b  = (M - 1) / (2 kappa + sqrt(4 kappa^2 + (M - 1)^2))
//! x0 = (1 - b) / (1 + b)
//! c  = kappa x0 + (M - 1) ln(1 - x0^2)
//! z ~ Beta((M - 1) / 2, (M - 1) / 2),  w = (1 - (1 + b) z) / (1 - (1 - b) z)
//! accept if kappa w + (M - 1) ln(1 - x0 w) - c >= ln u,  u ~ U(0, 1)
//! ```
//!
//! and the tangent direction is uniform on the sphere orthogonal to `mu`. The
//! sample is built around `e_1` and mapped onto `mu` by a Householder reflection.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CalmError, Result};
use crate::rng::{self, tag};
use crate::sphere::{dot, normalize_in_place, EmbeddingSet};

fn uniform_direction<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if normalize_in_place(&mut v).is_ok() {
            return v;
        }
    }
}

/// Householder reflection that maps `e_1` onto `mu`, applied to `x` in place.
fn reflect_onto(mu: &[f64], x: &mut [f64]) {
    // v = e_1 - mu; H = I - 2 v v^T / (v^T v)
    let mut v: Vec<f64> = mu.iter().map(|m| -m).collect();
    v[0] += 1.0;
    let vv = dot(&v, &v);
    if vv < 1e-24 {
        return;
    }
    let f = 2.0 * dot(&v, x) / vv;
    x.iter_mut().zip(&v).for_each(|(xi, vi)| *xi -= f * vi);
}

/// Draws `n` unit vectors from vMF(`mu`, `kappa`).
pub fn sample_vmf<R: Rng + ?Sized>(
    mu: &[f64],
    kappa: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let dim = mu.len();
    if dim < 2 {
        return Err(CalmError::InvalidConfig(format!("dimension {dim} < 2")));
    }
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(CalmError::OutOfRange {
            what: "kappa",
            value: kappa,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    if (crate::sphere::norm(mu) - 1.0).abs() > 1e-9 {
        return Err(CalmError::InvalidConfig("vMF mean direction must be unit-norm".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let m1 = (dim - 1) as f64;
    let b = m1 / (2.0 * kappa + (4.0 * kappa * kappa + m1 * m1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + m1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(m1 / 2.0, m1 / 2.0).expect("beta parameters are positive");

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let w = loop {
            let z: f64 = beta.sample(rng);
            let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
            let u: f64 = rng.random();
            if kappa * w + m1 * (1.0 - x0 * w).ln() - c >= u.ln() {
                break w;
            }
        };
        let tangent = uniform_direction(rng, dim - 1);
        let r = (1.0 - w * w).max(0.0).sqrt();
        let mut x = Vec::with_capacity(dim);
        x.push(w);
        x.extend(tangent.iter().map(|t| r * t));
        reflect_onto(mu, &mut x);
        normalize_in_place(&mut x)?;
        out.push(x);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum KappaSpec {
    /// One concentration per class.
    Fixed(Vec<f64>),
    /// Each class draws its concentration uniformly from `[lo, hi]`.
    Range { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Centroids uniform on the sphere.
    #[default]
    Uniform,
    /// Classes come in pairs whose centroids are close to antipodal.
    NearAntipodal,
    /// Centroids crowd around a few hubs, leaving much of the sphere empty.
    Clustered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub kappa: KappaSpec,
    pub samples_per_class: usize,
    pub dim: usize,
    #[serde(default)]
    pub placement: Placement,
    /// Concentration of class centroids around their hub (clustered) or of the
    /// antipodal partner around `-mu` (near_antipodal).
    #[serde(default = "default_placement_kappa")]
    pub placement_kappa: f64,
    /// Number of hubs for clustered placement.
    #[serde(default = "default_hubs")]
    pub hubs: usize,
    pub seed: u64,
}

fn default_placement_kappa() -> f64 {
    30.0
}

fn default_hubs() -> usize {
    3
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CalmError::InvalidConfig(msg));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.dim < 2 {
            return bad(format!("dimension {} < 2", self.dim));
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be >= 1".into());
        }
        match &self.kappa {
            KappaSpec::Fixed(k) => {
                if k.len() != self.classes {
                    return bad(format!("{} kappa values for {} classes", k.len(), self.classes));
                }
                if k.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                    return bad("kappa values must be finite and >= 0".into());
                }
            }
            KappaSpec::Range { lo, hi } => {
                if !(*lo >= 0.0 && lo <= hi && hi.is_finite()) {
                    return bad(format!("invalid kappa range [{lo}, {hi}]"));
                }
            }
        }
        if self.placement == Placement::Clustered && self.hubs == 0 {
            return bad("clustered placement needs at least one hub".into());
        }
        if !(self.placement_kappa >= 0.0 && self.placement_kappa.is_finite()) {
            return bad("placement_kappa must be finite and >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub set: EmbeddingSet,
    /// Configured concentration per class, indexed by class id.
    pub kappa: Vec<f64>,
    pub centroids: Vec<Vec<f64>>,
}

fn class_kappas(cfg: &SynthConfig) -> Vec<f64> {
    match &cfg.kappa {
        KappaSpec::Fixed(k) => k.clone(),
        KappaSpec::Range { lo, hi } => {
            let mut rng = rng::stream(cfg.seed, tag::SYNTH_KAPPA, 0);
            (0..cfg.classes)
                .map(|_| if lo == hi { *lo } else { rng.random_range(*lo..=*hi) })
                .collect()
        }
    }
}

fn centroids(cfg: &SynthConfig) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng::stream(cfg.seed, tag::SYNTH_CENTROID, 0);
    let dim = cfg.dim;
    match cfg.placement {
        Placement::Uniform => Ok((0..cfg.classes).map(|_| uniform_direction(&mut rng, dim)).collect()),
        Placement::NearAntipodal => {
            let mut out = Vec::with_capacity(cfg.classes);
            while out.len() < cfg.classes {
                let mu = uniform_direction(&mut rng, dim);
                let anti: Vec<f64> = mu.iter().map(|x| -x).collect();
                let partner = sample_vmf(&anti, cfg.placement_kappa, 1, &mut rng)?.remove(0);
                out.push(mu);
                if out.len() < cfg.classes {
                    out.push(partner);
                }
            }
            Ok(out)
        }
        Placement::Clustered => {
            let hubs: Vec<Vec<f64>> = (0..cfg.hubs).map(|_| uniform_direction(&mut rng, dim)).collect();
            (0..cfg.classes)
                .map(|j| Ok(sample_vmf(&hubs[j % hubs.len()], cfg.placement_kappa, 1, &mut rng)?.remove(0)))
                .collect()
        }
    }
}

/// Labeled dataset with class `j` drawn from vMF(centroid_j, kappa_j). Each class
/// samples from its own stream derived from `(seed, j)`.
pub fn make_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let kappa = class_kappas(cfg);
    let centroids = centroids(cfg)?;
    let mut data = Vec::with_capacity(cfg.classes * cfg.samples_per_class * cfg.dim);
    let mut labels = Vec::with_capacity(cfg.classes * cfg.samples_per_class);
    for (j, (mu, &k)) in centroids.iter().zip(&kappa).enumerate() {
        let mut rng = rng::stream(cfg.seed, tag::SYNTH_CLASS, j as u64);
        for x in sample_vmf(mu, k, cfg.samples_per_class, &mut rng)? {
            data.extend(x);
            labels.push(j as u32);
        }
    }
    Ok(SynthDataset {
        set: EmbeddingSet::new(data, labels, cfg.dim)?,
        kappa,
        centroids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::norm;

    fn resultant(points: &[Vec<f64>]) -> Vec<f64> {
        let mut sum = vec![0.0; points[0].len()];
        for p in points {
            sum.iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        sum.iter().map(|s| s / points.len() as f64).collect()
    }

    #[test]
    fn kappa_zero_is_uniform() {
        let mut rng = rng::stream(1, 0, 0);
        let mu = [0.0, 0.0, 1.0];
        let pts = sample_vmf(&mu, 0.0, 10_000, &mut rng).unwrap();
        assert!(norm(&resultant(&pts)) < 3.0 / 100.0);
    }

    #[test]
    fn concentrated_mean_direction() {
        let mut rng = rng::stream(2, 0, 0);
        let mut mu = vec![0.3, -0.2, 0.5, 0.1, 0.0, 0.7, -0.1, 0.2];
        normalize_in_place(&mut mu).unwrap();
        let pts = sample_vmf(&mu, 100.0, 10_000, &mut rng).unwrap();
        let mean = resultant(&pts);
        let cos = dot(&mean, &mu) / norm(&mean);
        assert!(cos.acos().to_degrees() < 5.0);
        assert!(pts.iter().all(|p| (norm(p) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn empty_and_invalid() {
        let mut rng = rng::stream(3, 0, 0);
        assert!(sample_vmf(&[1.0, 0.0], 5.0, 0, &mut rng).unwrap().is_empty());
        assert!(sample_vmf(&[1.0, 1.0], 5.0, 3, &mut rng).is_err());
        assert!(sample_vmf(&[1.0, 0.0], -1.0, 3, &mut rng).is_err());
    }

    fn cfg(placement: Placement) -> SynthConfig {
        SynthConfig {
            classes: 5,
            kappa: KappaSpec::Range { lo: 5.0, hi: 50.0 },
            samples_per_class: 7,
            dim: 6,
            placement,
            placement_kappa: 30.0,
            hubs: 2,
            seed: 99,
        }
    }

    #[test]
    fn datasets_are_deterministic_and_unit() {
        for p in [Placement::Uniform, Placement::NearAntipodal, Placement::Clustered] {
            let a = make_dataset(&cfg(p)).unwrap();
            let b = make_dataset(&cfg(p)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.set.len(), 35);
            assert!(a.set.rows().all(|r| (norm(r) - 1.0).abs() < 1e-12));
            assert!(a.kappa.iter().all(|&k| (5.0..=50.0).contains(&k)));
        }
        let mut other = cfg(Placement::Uniform);
        other.seed = 100;
        assert_ne!(make_dataset(&other).unwrap().set, make_dataset(&cfg(Placement::Uniform)).unwrap().set);
    }

    #[test]
    fn near_antipodal_pairs() {
        let d = make_dataset(&cfg(Placement::NearAntipodal)).unwrap();
        assert!(dot(&d.centroids[0], &d.centroids[1]) < -0.5);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(Placement::Uniform);
        c.classes = 1;
        assert!(make_dataset(&c).is_err());
        let mut c = cfg(Placement::Uniform);
        c.kappa = KappaSpec::Fixed(vec![1.0]);
        assert!(make_dataset(&c).is_err());
        let mut c = cfg(Placement::Uniform);
        c.kappa = KappaSpec::Range { lo: 10.0, hi: 5.0 };
        assert!(make_dataset(&c).is_err());
    }
}
