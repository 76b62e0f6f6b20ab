//! End-to-end evaluation of an embedding set: pair construction, calibration
//! range, utility curves, OPIS, epsilon-OPIS and recall@k.

use serde::{Deserialize, Serialize};

use crate::error::{CalmError, Result};
use crate::metrics::{
    self, calibration_range_from_far, class_curves, utility_curve, CalibrationRange, CurveOwner,
    EpsilonOpis, OpisReport, UtilityCurve,
};
use crate::pairs::{enumerate_positive_pairs, exhaustive_pairs, sample_negative_pairs, score_pairs};
use crate::sphere::EmbeddingSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    /// `ratio` negatives per positive pair, per class.
    #[default]
    Sampled,
    /// Every cross-class pair.
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub far_lo: f64,
    pub far_hi: f64,
    pub grid: usize,
    pub c: f64,
    pub epsilon: Vec<f64>,
    pub ratio: usize,
    pub seed: u64,
    pub negatives: NegativeSampling,
    pub recall_k: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            far_lo: 1e-2,
            far_hi: 1e-1,
            grid: metrics::DEFAULT_GRID,
            c: metrics::DEFAULT_C,
            epsilon: vec![10.0, 20.0, 50.0],
            ratio: 10,
            seed: 0,
            negatives: NegativeSampling::Sampled,
            recall_k: vec![1, 2, 4, 8],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.far_lo > 0.0 && self.far_lo < self.far_hi && self.far_hi <= 1.0) {
            return Err(CalmError::InvalidConfig(format!(
                "FAR band [{}, {}] must satisfy 0 < lo < hi <= 1",
                self.far_lo, self.far_hi
            )));
        }
        if self.grid < 2 {
            return Err(CalmError::InvalidConfig("grid must be >= 2".into()));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(CalmError::InvalidConfig("c must be > 0".into()));
        }
        if self.ratio == 0 {
            return Err(CalmError::InvalidConfig("ratio must be >= 1".into()));
        }
        if let Some(e) = self.epsilon.iter().find(|&&e| !(e > 0.0 && e <= 100.0)) {
            return Err(CalmError::InvalidConfig(format!("epsilon {e} outside (0, 100]")));
        }
        if self.recall_k.contains(&0) {
            return Err(CalmError::InvalidConfig("recall k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub range: CalibrationRange,
    pub opis: OpisReport,
    pub recall: Vec<RecallAt>,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    pub excluded_classes: Vec<u32>,
    pub class_curves: Vec<UtilityCurve>,
    pub pooled_curve: UtilityCurve,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.k == k).map(|r| r.value)
    }
}

pub fn evaluate(set: &EmbeddingSet, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let pairs = match cfg.negatives {
        NegativeSampling::Sampled => {
            enumerate_positive_pairs(set).merge(sample_negative_pairs(set, cfg.ratio, cfg.seed)?)
        }
        NegativeSampling::Exhaustive => {
            if set.classes().len() < 2 {
                return Err(CalmError::SingleClass);
            }
            exhaustive_pairs(set)
        }
    };
    let scored = score_pairs(set, &pairs)?;
    let positive_pairs = pairs.positive_count();
    let negative_pairs = pairs.negative_count();
    if positive_pairs == 0 {
        return Err(CalmError::InsufficientPairs {
            owner: "pooled".into(),
            positives: 0,
            negatives: negative_pairs,
        });
    }

    let range = calibration_range_from_far(&scored, cfg.far_lo, cfg.far_hi)?;
    let pooled_curve = utility_curve(&scored, CurveOwner::Pooled, &range, cfg.grid, cfg.c)?;
    let (curves, excluded_classes) = class_curves(&scored, &range, cfg.grid, cfg.c)?;
    if curves.is_empty() {
        return Err(CalmError::InsufficientPairs {
            owner: "every class".into(),
            positives: positive_pairs,
            negatives: negative_pairs,
        });
    }
    let mut opis = metrics::opis(&curves, &pooled_curve, None)?;
    for &epsilon in &cfg.epsilon {
        let value = metrics::epsilon_opis(&scored, &curves, epsilon, cfg.c)?;
        opis.epsilon_opis.push(EpsilonOpis { epsilon, value });
    }

    let ks: Vec<usize> = cfg.recall_k.iter().copied().filter(|&k| k < set.len()).collect();
    let recall = if ks.is_empty() {
        Vec::new()
    } else {
        metrics::recall_at_ks(set, &ks)?
            .into_iter()
            .zip(&ks)
            .map(|(value, &k)| RecallAt { k, value })
            .collect()
    };

    Ok(EvalReport {
        range,
        opis,
        recall,
        positive_pairs,
        negative_pairs,
        excluded_classes,
        class_curves: curves,
        pooled_curve,
    })
}
