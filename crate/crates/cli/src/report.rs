//! Report JSON and CSV outputs.
//!
//! | file          | columns / fields                                                                 |
//! |---------------|----------------------------------------------------------------------------------|
//! | report JSON   | [`Report`]                                                                       |
//! | curves CSV    | `class_id,d,utility`; `class_id` is `pooled` for the pooled curve               |
//! | history CSV   | `epoch,phase,loss,recall1,opis,selected_positive,selected_negative,margin_min,margin_mean,margin_max` |
//! | sweep CSV     | `run,m_plus,m_minus,recall1,opis`; row 0 is the `baseline` run without CAM       |
//!
//! CSV numbers carry 9 significant digits in scientific notation; missing
//! values are empty cells.

use calm_core::eval::{EvalConfig, EvalReport, RecallAt};
use calm_core::metrics::{CalibrationRange, ClassContribution, CurveOwner, EpsilonOpis};
use calm_core::trainer::{EpochRecord, Phase};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

pub const HISTORY_HEADER: &str =
    "epoch,phase,loss,recall1,opis,selected_positive,selected_negative,margin_min,margin_mean,margin_max";
pub const CURVES_HEADER: &str = "class_id,d,utility";
pub const SWEEP_HEADER: &str = "run,m_plus,m_minus,recall1,opis";

/// Locale-independent, 9 significant digits.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:.8e}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingInfo {
    /// Epochs completed by this invocation.
    pub epochs_run: usize,
    pub last_epoch: Option<usize>,
    pub adacam_lr_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema_version: u32,
    pub opis: f64,
    pub epsilon_opis: Vec<EpsilonOpis>,
    pub recall: Vec<RecallAt>,
    pub range: CalibrationRange,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    pub excluded_classes: Vec<u32>,
    pub per_class: Vec<ClassContribution>,
    pub settings: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingInfo>,
}

impl Report {
    pub fn new(r: &EvalReport, settings: &EvalConfig, training: Option<TrainingInfo>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            opis: r.opis.opis,
            epsilon_opis: r.opis.epsilon_opis.clone(),
            recall: r.recall.clone(),
            range: r.range,
            positive_pairs: r.positive_pairs,
            negative_pairs: r.negative_pairs,
            excluded_classes: r.excluded_classes.clone(),
            per_class: r.opis.per_class.clone(),
            settings: settings.clone(),
            training,
        }
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.k == k).map(|r| r.value)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Pooled curve first, then classes in ascending id order.
pub fn curves_csv(r: &EvalReport) -> String {
    let mut out = format!("{CURVES_HEADER}\n");
    for curve in std::iter::once(&r.pooled_curve).chain(&r.class_curves) {
        let id = match curve.owner {
            CurveOwner::Pooled => "pooled".to_string(),
            CurveOwner::Class(j) => j.to_string(),
        };
        for (d, u) in curve.grid.iter().zip(&curve.values) {
            out.push_str(&format!("{id},{},{}\n", num(*d), num(*u)));
        }
    }
    out
}

pub fn history_row(r: &EpochRecord) -> String {
    let phase = match r.phase {
        Phase::Train => "train",
        Phase::Adacam => "adacam",
    };
    format!(
        "{},{phase},{},{},{},{},{},{},{},{}",
        r.epoch,
        num(r.loss),
        opt(r.recall1),
        opt(r.opis),
        r.selected_positive,
        r.selected_negative,
        opt(r.margin_min),
        opt(r.margin_mean),
        opt(r.margin_max),
    )
}

/// Header plus `previous` rows (verbatim) plus rows for `records`.
pub fn history_csv(previous: &[String], records: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for row in previous {
        out.push_str(row);
        out.push('\n');
    }
    for r in records {
        out.push_str(&history_row(r));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `baseline` or `cam`.
    pub run: String,
    pub m_plus: Option<f64>,
    pub m_minus: Option<f64>,
    pub recall1: Option<f64>,
    pub opis: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.run,
            opt(r.m_plus),
            opt(r.m_minus),
            opt(r.recall1),
            num(r.opis)
        ));
    }
    out
}
