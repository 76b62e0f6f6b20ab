//! Desk-scale metric-learning loop.
//!
//! Each step scores all pairs of a mini-batch, evaluates the base loss plus the
//! optional CAM regularizer, projects the gradient onto the sphere's tangent
//! space, takes a plain gradient-descent step and renormalizes. Two
//! parameterizations are supported: the embedding rows themselves
//! ([`Mode::FreeEmbedding`]) or a bias-free linear map of fixed input features
//! followed by normalization ([`Mode::LinearEncoder`]).
//!
//! AdaCAM fine-tuning starts from a CAM-trained model, keeps the negative margin
//! fixed and refreshes per-class positive margins from vMF concentrations at the
//! end of every epoch.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CalmError, Result};
use crate::eval::{evaluate, EvalConfig};
use crate::losses::{
    batch_triplets, cam_loss, contrastive_loss, final_loss, triplet_loss, CamConfig, LossValueAndGrad,
    PairLoss,
};
use crate::pairs::{batch_pairs, score_pairs};
use crate::rng::{self, tag};
use crate::sphere::{dot, normalize_in_place, EmbeddingSet};
use crate::vmf::{epoch_refresh, ClassMeanTable, RefreshConfig, VmfState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseLoss {
    /// Regularizer only.
    None,
    Contrastive { neg_margin: f64 },
    Triplet { margin: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Mode {
    #[default]
    FreeEmbedding,
    LinearEncoder { out_dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaCamConfig {
    pub finetune_epochs: usize,
    pub lr: f64,
    /// Multiplier on `lr`. Desk-scale losses can make the nominal rate a no-op.
    pub lr_scale: f64,
    pub percentile_lo: f64,
    pub percentile_hi: f64,
}

impl Default for AdaCamConfig {
    fn default() -> Self {
        Self {
            finetune_epochs: 30,
            lr: 1e-6,
            lr_scale: 1.0,
            percentile_lo: crate::vmf::DEFAULT_PERCENTILE_LO,
            percentile_hi: crate::vmf::DEFAULT_PERCENTILE_HI,
        }
    }
}

impl AdaCamConfig {
    pub fn effective_lr(&self) -> f64 {
        self.lr * self.lr_scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub mode: Mode,
    pub base_loss: BaseLoss,
    #[serde(default)]
    pub cam: Option<CamConfig>,
    #[serde(default)]
    pub adacam: Option<AdaCamConfig>,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_classes_per_batch")]
    pub classes_per_batch: usize,
    #[serde(default = "default_samples_per_class")]
    pub samples_per_class: usize,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate every `eval_every` epochs (and after the last one); 0 disables.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_classes_per_batch() -> usize {
    8
}

fn default_samples_per_class() -> usize {
    4
}

fn default_eval_every() -> usize {
    1
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CalmError::InvalidConfig(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and >= 0", self.lr));
        }
        if self.classes_per_batch < 2 {
            return bad("classes_per_batch must be >= 2".into());
        }
        if self.samples_per_class < 2 {
            return bad("samples_per_class must be >= 2".into());
        }
        if let Some(cam) = &self.cam {
            cam.validate()?;
        }
        if let Some(ada) = &self.adacam {
            if self.cam.is_none() {
                return bad("AdaCAM fine-tuning needs a CAM configuration".into());
            }
            if !(ada.effective_lr() >= 0.0 && ada.effective_lr().is_finite()) {
                return bad("AdaCAM learning rate must be finite and >= 0".into());
            }
        }
        if let Mode::LinearEncoder { out_dim } = self.mode {
            if out_dim < 2 {
                return bad("encoder out_dim must be >= 2".into());
            }
        }
        if self.base_loss == BaseLoss::None && self.cam.is_none() {
            return bad("nothing to optimize: no base loss and no CAM".into());
        }
        Ok(())
    }
}

/// Mini-batches for one epoch.
///
/// Every class is split into shuffled chunks of `samples_per_class`; a class
/// smaller than that fills its chunk by drawing members again. Round `r` takes
/// the `r`-th chunk of every class that has one, shuffles the classes and groups
/// them `classes_per_batch` at a time. A short final group is topped up with
/// random chunks of other classes so that each batch spans
/// `min(classes_per_batch, T)` distinct classes.
pub fn build_batches(
    set: &EmbeddingSet,
    classes_per_batch: usize,
    samples_per_class: usize,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    let mut rng = rng::stream(seed, tag::BATCHES, epoch);
    let members: Vec<(u32, Vec<usize>)> = set.class_members().into_iter().collect();
    let per_batch = classes_per_batch.min(members.len());

    let draw_chunk = |pool: &[usize], rng: &mut rng::Rng64| -> Vec<usize> {
        let mut chunk: Vec<usize> = pool.choose_multiple(rng, samples_per_class.min(pool.len())).copied().collect();
        while chunk.len() < samples_per_class {
            chunk.push(pool[rng.random_range(0..pool.len())]);
        }
        chunk
    };

    let chunks: Vec<Vec<Vec<usize>>> = members
        .iter()
        .map(|(_, idx)| {
            let mut shuffled = idx.clone();
            shuffled.shuffle(&mut rng);
            shuffled
                .chunks(samples_per_class)
                .map(|c| {
                    let mut chunk = c.to_vec();
                    while chunk.len() < samples_per_class {
                        chunk.push(idx[rng.random_range(0..idx.len())]);
                    }
                    chunk
                })
                .collect()
        })
        .collect();
    let rounds = chunks.iter().map(Vec::len).max().unwrap_or(0);

    let mut batches = Vec::new();
    for round in 0..rounds {
        let mut active: Vec<usize> = (0..members.len()).filter(|&c| chunks[c].len() > round).collect();
        active.shuffle(&mut rng);
        for group in active.chunks(per_batch) {
            let mut batch: Vec<usize> = group.iter().flat_map(|&c| chunks[c][round].iter().copied()).collect();
            if group.len() < per_batch {
                let mut others: Vec<usize> = (0..members.len()).filter(|c| !group.contains(c)).collect();
                others.shuffle(&mut rng);
                for &c in &others[..per_batch - group.len()] {
                    batch.extend(draw_chunk(&members[c].1, &mut rng));
                }
            }
            batches.push(batch);
        }
    }
    batches
}

/// Trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Free(EmbeddingSet),
    LinearEncoder(LinearEncoder),
}

/// `e = normalize(W x)` with `W` of shape `out_dim x in_dim`, no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEncoder {
    pub features: EmbeddingSet,
    pub weights: Vec<f64>,
    pub out_dim: usize,
    embeddings: EmbeddingSet,
}

impl LinearEncoder {
    /// Identity-initialized when `out_dim` equals the feature dimension, Gaussian
    /// with variance `1 / in_dim` otherwise.
    pub fn new(features: EmbeddingSet, out_dim: usize, seed: u64) -> Result<Self> {
        let in_dim = features.dim();
        let weights: Vec<f64> = if out_dim == in_dim {
            (0..out_dim * in_dim).map(|k| if k / in_dim == k % in_dim { 1.0 } else { 0.0 }).collect()
        } else {
            let mut rng = rng::stream(seed, tag::ENCODER_INIT, 0);
            let scale = 1.0 / (in_dim as f64).sqrt();
            (0..out_dim * in_dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        Self::with_weights(features, weights, out_dim)
    }

    pub fn with_weights(features: EmbeddingSet, weights: Vec<f64>, out_dim: usize) -> Result<Self> {
        if weights.len() != out_dim * features.dim() {
            return Err(CalmError::DimensionMismatch {
                expected: out_dim * features.dim(),
                found: weights.len(),
            });
        }
        let embeddings = encode(&weights, out_dim, &features)?;
        Ok(Self {
            features,
            weights,
            out_dim,
            embeddings,
        })
    }

    pub fn embeddings(&self) -> &EmbeddingSet {
        &self.embeddings
    }

    /// Embeds new samples with the current weights.
    pub fn encode(&self, features: &EmbeddingSet) -> Result<EmbeddingSet> {
        if features.dim() != self.features.dim() {
            return Err(CalmError::DimensionMismatch {
                expected: self.features.dim(),
                found: features.dim(),
            });
        }
        encode(&self.weights, self.out_dim, features)
    }
}

fn project(weights: &[f64], out_dim: usize, x: &[f64]) -> Vec<f64> {
    weights.chunks_exact(x.len()).take(out_dim).map(|w| dot(w, x)).collect()
}

fn encode(weights: &[f64], out_dim: usize, features: &EmbeddingSet) -> Result<EmbeddingSet> {
    let mut data = Vec::with_capacity(features.len() * out_dim);
    for x in features.rows() {
        data.extend(project(weights, out_dim, x));
    }
    EmbeddingSet::from_raw(data, features.labels().to_vec(), out_dim)
}

impl Model {
    pub fn new(init: &EmbeddingSet, mode: Mode, seed: u64) -> Result<Self> {
        match mode {
            Mode::FreeEmbedding => Ok(Model::Free(init.clone())),
            Mode::LinearEncoder { out_dim } => Ok(Model::LinearEncoder(LinearEncoder::new(init.clone(), out_dim, seed)?)),
        }
    }

    pub fn embeddings(&self) -> &EmbeddingSet {
        match self {
            Model::Free(set) => set,
            Model::LinearEncoder(enc) => enc.embeddings(),
        }
    }

    /// Gradient step given the tangent gradient with respect to the embedding rows.
    fn step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if lr == 0.0 {
            return Ok(());
        }
        match self {
            Model::Free(set) => sphere_step(set, grad, lr),
            Model::LinearEncoder(enc) => {
                let in_dim = enc.features.dim();
                let m = enc.out_dim;
                let mut wgrad = vec![0.0; m * in_dim];
                for (g, x) in grad.chunks_exact(m).zip(enc.features.rows()) {
                    if g.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    // d normalize(y) / dy = (I - e e^T) / |y|; g is already tangent.
                    let y_norm = crate::sphere::norm(&project(&enc.weights, m, x));
                    for (r, &gr) in g.iter().enumerate() {
                        let s = gr / y_norm;
                        wgrad[r * in_dim..(r + 1) * in_dim]
                            .iter_mut()
                            .zip(x)
                            .for_each(|(w, xk)| *w += s * xk);
                    }
                }
                enc.weights.iter_mut().zip(&wgrad).for_each(|(w, g)| *w -= lr * g);
                enc.embeddings = encode(&enc.weights, m, &enc.features)?;
                Ok(())
            }
        }
    }
}

/// `x <- normalize(x - lr * g)` for every row with a non-zero gradient.
pub fn sphere_step(set: &mut EmbeddingSet, grad: &[f64], lr: f64) -> Result<()> {
    let m = set.dim();
    for (x, g) in set.data_mut().chunks_exact_mut(m).zip(grad.chunks_exact(m)) {
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        x.iter_mut().zip(g).for_each(|(xk, gk)| *xk -= lr * gk);
        normalize_in_place(x)?;
    }
    Ok(())
}

/// Base loss plus CAM on one mini-batch, with the gradient over all rows of `set`.
pub fn batch_objective(
    set: &EmbeddingSet,
    batch: &[usize],
    base: &BaseLoss,
    cam: Option<&CamConfig>,
    class_margins: Option<&BTreeMap<u32, f64>>,
) -> Result<LossValueAndGrad> {
    let scored = score_pairs(set, &batch_pairs(set, batch)?)?;
    let base_loss = match *base {
        BaseLoss::None => PairLoss::default(),
        BaseLoss::Contrastive { neg_margin } => contrastive_loss(&scored, neg_margin),
        BaseLoss::Triplet { margin } => match triplet_loss(set, &batch_triplets(set, batch), margin) {
            Err(CalmError::NoValidTriplets) => PairLoss::default(),
            other => other?,
        },
    };
    let reg = cam.map_or_else(PairLoss::default, |c| cam_loss(&scored, c, class_margins));
    final_loss(base_loss.embedding_grad(set), reg.embedding_grad(set))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Adacam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean objective over the epoch's steps.
    pub loss: f64,
    pub recall1: Option<f64>,
    pub opis: Option<f64>,
    pub selected_positive: usize,
    pub selected_negative: usize,
    pub margin_min: Option<f64>,
    pub margin_mean: Option<f64>,
    pub margin_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Learning-rate multiplier applied during AdaCAM fine-tuning.
    pub adacam_lr_scale: Option<f64>,
}

impl TrainHistory {
    pub fn last_epoch(&self) -> Option<usize> {
        self.records.last().map(|r| r.epoch)
    }

    /// Most recent record carrying evaluation results.
    pub fn last_evaluated(&self) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.opis.is_some())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: TrainHistory,
    /// vMF state used in each AdaCAM epoch (first entry: margins for the first
    /// fine-tuning epoch).
    pub vmf_states: Vec<VmfState>,
}

impl TrainOutcome {
    pub fn embeddings(&self) -> &EmbeddingSet {
        self.model.embeddings()
    }
}

/// A run stopped by a non-finite objective, with everything up to the failure.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{error}")]
pub struct TrainAbort {
    pub error: CalmError,
    pub partial: Option<Box<TrainOutcome>>,
}

impl From<CalmError> for TrainAbort {
    fn from(error: CalmError) -> Self {
        Self { error, partial: None }
    }
}

struct EpochStats {
    loss: f64,
    selected_positive: usize,
    selected_negative: usize,
}

fn run_epoch(
    model: &mut Model,
    cfg: &TrainConfig,
    epoch: usize,
    lr: f64,
    class_margins: Option<&BTreeMap<u32, f64>>,
    mut table: Option<&mut ClassMeanTable>,
) -> Result<EpochStats> {
    let batches = build_batches(
        model.embeddings(),
        cfg.classes_per_batch,
        cfg.samples_per_class,
        cfg.seed,
        epoch as u64,
    );
    let mut total = 0.0;
    let mut selected_positive = 0;
    let mut selected_negative = 0;
    for (step, batch) in batches.iter().enumerate() {
        let emb = model.embeddings();
        if let Some(t) = table.as_deref_mut() {
            let mut unique = batch.clone();
            unique.sort_unstable();
            unique.dedup();
            t.update(emb, &unique);
        }
        let obj = batch_objective(emb, batch, &cfg.base_loss, cfg.cam.as_ref(), class_margins)?;
        if !obj.value.is_finite() || obj.grad.iter().any(|g| !g.is_finite()) {
            return Err(CalmError::NonFiniteLoss { epoch, step });
        }
        total += obj.value;
        selected_positive += obj.selected_positive;
        selected_negative += obj.selected_negative;
        // an overflowing step surfaces as a non-finite or unnormalizable row
        let stepped = model.step(&obj.grad, lr);
        let emb = model.embeddings();
        let off_sphere = |&i: &usize| !((crate::sphere::norm(emb.row(i)) - 1.0).abs() <= 1e-9);
        if stepped.is_err() || batch.iter().any(off_sphere) {
            return Err(CalmError::NonFiniteLoss { epoch, step });
        }
    }
    Ok(EpochStats {
        loss: if batches.is_empty() { 0.0 } else { total / batches.len() as f64 },
        selected_positive,
        selected_negative,
    })
}

fn quick_eval(set: &EmbeddingSet, eval: &EvalConfig) -> Result<(f64, f64)> {
    let cfg = EvalConfig {
        epsilon: Vec::new(),
        recall_k: vec![1],
        ..eval.clone()
    };
    let r = evaluate(set, &cfg)?;
    Ok((r.recall_at(1).unwrap_or(f64::NAN), r.opis.opis))
}

fn due(cfg: &TrainConfig, done: usize, total: usize) -> bool {
    cfg.eval_every > 0 && (done.is_multiple_of(cfg.eval_every) || done == total)
}

/// Runs `cfg.epochs` epochs of base loss + CAM, numbered from `first_epoch`.
pub fn train_from(
    model: Model,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    first_epoch: usize,
) -> std::result::Result<TrainOutcome, TrainAbort> {
    cfg.validate()?;
    let mut outcome = TrainOutcome {
        model,
        history: TrainHistory::default(),
        vmf_states: Vec::new(),
    };
    for k in 1..=cfg.epochs {
        let epoch = first_epoch + k - 1;
        let stats = match run_epoch(&mut outcome.model, cfg, epoch, cfg.lr, None, None) {
            Ok(s) => s,
            Err(error) => {
                return Err(TrainAbort {
                    error,
                    partial: Some(Box::new(outcome)),
                })
            }
        };
        let (recall1, opis) = if due(cfg, k, cfg.epochs) {
            let (r, o) = quick_eval(outcome.model.embeddings(), eval)?;
            (Some(r), Some(o))
        } else {
            (None, None)
        };
        outcome.history.records.push(EpochRecord {
            epoch,
            phase: Phase::Train,
            loss: stats.loss,
            recall1,
            opis,
            selected_positive: stats.selected_positive,
            selected_negative: stats.selected_negative,
            margin_min: None,
            margin_mean: None,
            margin_max: None,
        });
    }
    Ok(outcome)
}

/// Trains from an initial embedding set (free mode) or feature set (encoder mode).
pub fn train(
    init: &EmbeddingSet,
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> std::result::Result<TrainOutcome, TrainAbort> {
    let model = Model::new(init, cfg.mode, cfg.seed)?;
    train_from(model, cfg, eval, 1)
}

/// Fine-tunes a CAM-trained model with class-adaptive positive margins.
///
/// Margins for the first epoch come from the concentrations of the starting
/// embeddings; afterwards they are refreshed from the embeddings seen in each
/// epoch's forward passes. Epoch numbers continue from `first_epoch`.
pub fn finetune_adacam(
    model: Model,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    first_epoch: usize,
) -> std::result::Result<TrainOutcome, TrainAbort> {
    cfg.validate()?;
    let ada = cfg
        .adacam
        .ok_or_else(|| CalmError::InvalidConfig("AdaCAM is not enabled".into()))?;
    let cam = cfg.cam.expect("validated: AdaCAM implies CAM");
    let refresh = RefreshConfig {
        m_plus: cam.m_plus,
        percentile_lo: ada.percentile_lo,
        percentile_hi: ada.percentile_hi,
    };
    let lr = ada.effective_lr();

    let mut outcome = TrainOutcome {
        model,
        history: TrainHistory {
            records: Vec::new(),
            adacam_lr_scale: Some(ada.lr_scale),
        },
        vmf_states: Vec::new(),
    };
    if ada.finetune_epochs == 0 {
        return Ok(outcome);
    }

    let dim = outcome.model.embeddings().dim();
    let mut table = ClassMeanTable::new(dim);
    table.update_all(outcome.model.embeddings());
    let mut state = epoch_refresh(&mut table, &refresh, None)?;

    for k in 1..=ada.finetune_epochs {
        let epoch = first_epoch + k - 1;
        let margins = state.margins();
        outcome.vmf_states.push(state.clone());
        let stats = match run_epoch(&mut outcome.model, cfg, epoch, lr, Some(&margins), Some(&mut table)) {
            Ok(s) => s,
            Err(error) => {
                return Err(TrainAbort {
                    error,
                    partial: Some(Box::new(outcome)),
                })
            }
        };
        let values: Vec<f64> = margins.values().copied().collect();
        let (recall1, opis) = if due(cfg, k, ada.finetune_epochs) {
            let (r, o) = quick_eval(outcome.model.embeddings(), eval)?;
            (Some(r), Some(o))
        } else {
            (None, None)
        };
        outcome.history.records.push(EpochRecord {
            epoch,
            phase: Phase::Adacam,
            loss: stats.loss,
            recall1,
            opis,
            selected_positive: stats.selected_positive,
            selected_negative: stats.selected_negative,
            margin_min: values.iter().copied().reduce(f64::min),
            margin_mean: Some(values.iter().sum::<f64>() / values.len() as f64),
            margin_max: values.iter().copied().reduce(f64::max),
        });
        state = epoch_refresh(&mut table, &refresh, Some(&state))?;
    }
    Ok(outcome)
}

/// Main training phase followed by AdaCAM fine-tuning when configured.
pub fn run(
    init: &EmbeddingSet,
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> std::result::Result<TrainOutcome, TrainAbort> {
    run_from(Model::new(init, cfg.mode, cfg.seed)?, cfg, eval, 1)
}

/// [`run`] starting from an existing model, with epochs numbered from `first_epoch`.
pub fn run_from(
    model: Model,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    first_epoch: usize,
) -> std::result::Result<TrainOutcome, TrainAbort> {
    let trained = train_from(model, cfg, eval, first_epoch)?;
    if cfg.adacam.is_none() {
        return Ok(trained);
    }
    let next = first_epoch + cfg.epochs;
    let mut records = trained.history.records;
    let mut tuned = finetune_adacam(trained.model, cfg, eval, next).map_err(|mut abort| {
        if let Some(partial) = abort.partial.as_mut() {
            let mut all = records.clone();
            all.append(&mut partial.history.records);
            partial.history.records = all;
        }
        abort
    })?;
    records.append(&mut tuned.history.records);
    tuned.history.records = records;
    Ok(tuned)
}
