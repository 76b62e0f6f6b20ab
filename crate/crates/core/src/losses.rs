//! Pairwise losses on cosine similarities and their gradients.
//!
//! Each loss first produces a value together with `dL/ds` for every similarity
//! it touched ([`PairLoss`]). [`PairLoss::embedding_grad`] then pushes those
//! through `s_ij = u_i . u_j` and projects every row onto the tangent space of
//! the sphere, giving the gradient with respect to the embedding matrix.
//!
//! The calibration-aware margin (CAM) regularizer penalizes positive pairs with
//! similarity at or below `m_plus` and negative pairs at or above `m_minus`, each
//! side averaged over the pairs it selects:
//!
//! ```text
//! L = l+ * sum_{s in S+, s <= m+} (m+ - s) / |S^{m+}|  +  l- * sum_{s in S-, s >= m-} (s - m-) / |S^{m-}|
//! ```
//!
//! A side that selects nothing contributes 0. The selection counts are treated
//! as constants when differentiating.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CalmError, Result};
use crate::pairs::ScoredPairSet;
use crate::sphere::{dot, EmbeddingSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    #[serde(default = "one")]
    pub lambda_plus: f64,
    #[serde(default = "one")]
    pub lambda_minus: f64,
}

fn one() -> f64 {
    1.0
}

impl CamConfig {
    pub fn new(m_plus: f64, m_minus: f64) -> Self {
        Self {
            m_plus,
            m_minus,
            lambda_plus: 1.0,
            lambda_minus: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_open = |x: f64| x > -1.0 && x < 1.0;
        if !in_open(self.m_plus) || !in_open(self.m_minus) {
            return Err(CalmError::InvalidConfig(format!(
                "CAM margins must lie in (-1, 1), got m+ = {}, m- = {}",
                self.m_plus, self.m_minus
            )));
        }
        if !(self.m_minus < self.m_plus) {
            return Err(CalmError::InvalidConfig(format!(
                "CAM needs m- < m+, got m- = {} and m+ = {}",
                self.m_minus, self.m_plus
            )));
        }
        if !(self.lambda_plus >= 0.0 && self.lambda_minus >= 0.0) {
            return Err(CalmError::InvalidConfig("CAM weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// `dL/ds` for the similarity between samples `i` and `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityGrad {
    pub i: usize,
    pub j: usize,
    pub grad: f64,
}

/// Loss value with its gradient with respect to pair similarities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairLoss {
    pub value: f64,
    pub sim_grads: Vec<SimilarityGrad>,
    pub selected_positive: usize,
    pub selected_negative: usize,
}

/// Loss value with its tangent gradient with respect to an `N x M` embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValueAndGrad {
    pub value: f64,
    pub grad: Vec<f64>,
    pub rows: usize,
    pub dim: usize,
    pub selected_positive: usize,
    pub selected_negative: usize,
}

impl PairLoss {
    pub fn embedding_grad(&self, set: &EmbeddingSet) -> LossValueAndGrad {
        LossValueAndGrad {
            value: self.value,
            grad: grad_wrt_embeddings(set, &self.sim_grads),
            rows: set.len(),
            dim: set.dim(),
            selected_positive: self.selected_positive,
            selected_negative: self.selected_negative,
        }
    }
}

/// CAM regularizer. `class_margins` overrides `m_plus` per class (AdaCAM); a
/// class missing from the map uses `cfg.m_plus`.
pub fn cam_loss(
    scored: &ScoredPairSet,
    cfg: &CamConfig,
    class_margins: Option<&BTreeMap<u32, f64>>,
) -> PairLoss {
    let margin_for = |class: u32| {
        class_margins
            .and_then(|m| m.get(&class).copied())
            .unwrap_or(cfg.m_plus)
    };

    let mut pos_sum = 0.0;
    let mut neg_sum = 0.0;
    let mut pos_selected = Vec::new();
    let mut neg_selected = Vec::new();
    for e in scored.entries() {
        let s = e.similarity;
        if e.pair.positive {
            let m = margin_for(e.pair.anchor);
            if s <= m {
                pos_sum += m - s;
                pos_selected.push((e.pair.a, e.pair.b));
            }
        } else if s >= cfg.m_minus {
            neg_sum += s - cfg.m_minus;
            neg_selected.push((e.pair.a, e.pair.b));
        }
    }

    let mut value = 0.0;
    let mut sim_grads = Vec::with_capacity(pos_selected.len() + neg_selected.len());
    if !pos_selected.is_empty() {
        let count = pos_selected.len() as f64;
        value += cfg.lambda_plus * pos_sum / count;
        let g = -cfg.lambda_plus / count;
        sim_grads.extend(pos_selected.iter().map(|&(i, j)| SimilarityGrad { i, j, grad: g }));
    }
    if !neg_selected.is_empty() {
        let count = neg_selected.len() as f64;
        value += cfg.lambda_minus * neg_sum / count;
        let g = cfg.lambda_minus / count;
        sim_grads.extend(neg_selected.iter().map(|&(i, j)| SimilarityGrad { i, j, grad: g }));
    }
    PairLoss {
        value,
        sim_grads,
        selected_positive: pos_selected.len(),
        selected_negative: neg_selected.len(),
    }
}

/// Pairwise contrastive loss in similarity space: positives are pulled towards
/// `s = 1` with penalty `1 - s`, negatives are pushed below `neg_margin` with
/// penalty `max(0, s - neg_margin)`. Each side is averaged over all its pairs.
pub fn contrastive_loss(scored: &ScoredPairSet, neg_margin: f64) -> PairLoss {
    let n_pos = scored.positives().count();
    let n_neg = scored.len() - n_pos;
    let mut value_pos = 0.0;
    let mut value_neg = 0.0;
    let mut sim_grads = Vec::new();
    let mut active_neg = 0;
    for e in scored.entries() {
        let s = e.similarity;
        if e.pair.positive {
            value_pos += 1.0 - s;
            sim_grads.push(SimilarityGrad {
                i: e.pair.a,
                j: e.pair.b,
                grad: -1.0 / n_pos as f64,
            });
        } else if s > neg_margin {
            value_neg += s - neg_margin;
            active_neg += 1;
            sim_grads.push(SimilarityGrad {
                i: e.pair.a,
                j: e.pair.b,
                grad: 1.0 / n_neg as f64,
            });
        }
    }
    let mut value = 0.0;
    if n_pos > 0 {
        value += value_pos / n_pos as f64;
    }
    if n_neg > 0 {
        value += value_neg / n_neg as f64;
    }
    PairLoss {
        value,
        sim_grads,
        selected_positive: n_pos,
        selected_negative: active_neg,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Every `(anchor, positive, negative)` over the distinct samples of a batch.
pub fn batch_triplets(set: &EmbeddingSet, batch: &[usize]) -> Vec<Triplet> {
    let mut idx = batch.to_vec();
    idx.sort_unstable();
    idx.dedup();
    let mut out = Vec::new();
    for &a in &idx {
        for &p in &idx {
            if p == a || set.label(p) != set.label(a) {
                continue;
            }
            for &n in &idx {
                if set.label(n) != set.label(a) {
                    out.push(Triplet {
                        anchor: a,
                        positive: p,
                        negative: n,
                    });
                }
            }
        }
    }
    out
}

/// Mean over triplets of `max(0, s_an - s_ap + margin)`.
pub fn triplet_loss(set: &EmbeddingSet, triplets: &[Triplet], margin: f64) -> Result<PairLoss> {
    if triplets.is_empty() {
        return Err(CalmError::NoValidTriplets);
    }
    let scale = 1.0 / triplets.len() as f64;
    let mut value = 0.0;
    let mut active = 0;
    let mut sim_grads = Vec::new();
    for t in triplets {
        let s_ap = set.similarity(t.anchor, t.positive);
        let s_an = set.similarity(t.anchor, t.negative);
        let h = s_an - s_ap + margin;
        if h > 0.0 {
            value += h;
            active += 1;
            sim_grads.push(SimilarityGrad { i: t.anchor, j: t.negative, grad: scale });
            sim_grads.push(SimilarityGrad { i: t.anchor, j: t.positive, grad: -scale });
        }
    }
    Ok(PairLoss {
        value: value * scale,
        sim_grads,
        selected_positive: active,
        selected_negative: active,
    })
}

/// Chain rule through `s_ij = u_i . u_j`, then projection of each row onto the
/// tangent space at `u_i`: `g - (g . u) u`. Accumulation follows the order of
/// `sim_grads`.
pub fn grad_wrt_embeddings(set: &EmbeddingSet, sim_grads: &[SimilarityGrad]) -> Vec<f64> {
    let m = set.dim();
    let mut grad = vec![0.0; set.len() * m];
    for sg in sim_grads {
        if sg.grad == 0.0 {
            continue;
        }
        let (ui, uj) = (set.row(sg.i), set.row(sg.j));
        for k in 0..m {
            grad[sg.i * m + k] += sg.grad * uj[k];
        }
        for k in 0..m {
            grad[sg.j * m + k] += sg.grad * ui[k];
        }
    }
    for (g, u) in grad.chunks_exact_mut(m).zip(set.rows()) {
        let radial = dot(g, u);
        if radial != 0.0 {
            g.iter_mut().zip(u).for_each(|(gk, uk)| *gk -= radial * uk);
        }
    }
    grad
}

/// Base loss plus regularizer: values and gradients add.
pub fn final_loss(base: LossValueAndGrad, reg: LossValueAndGrad) -> Result<LossValueAndGrad> {
    if (base.rows, base.dim) != (reg.rows, reg.dim) {
        return Err(CalmError::ShapeMismatch {
            left: (base.rows, base.dim),
            right: (reg.rows, reg.dim),
        });
    }
    let grad = base.grad.iter().zip(&reg.grad).map(|(a, b)| a + b).collect();
    Ok(LossValueAndGrad {
        value: base.value + reg.value,
        grad,
        rows: base.rows,
        dim: base.dim,
        selected_positive: reg.selected_positive,
        selected_negative: reg.selected_negative,
    })
}
