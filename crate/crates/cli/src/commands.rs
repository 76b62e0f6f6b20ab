//! The `gen`, `eval`, `train` and `sweep` commands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use calm_core::eval::{evaluate, EvalConfig, EvalReport};
use calm_core::losses::CamConfig;
use calm_core::synth::{make_dataset, SynthConfig};
use calm_core::trainer::{run_from, LinearEncoder, Mode, Model, TrainAbort, TrainOutcome};
use calm_core::{CalmError, EmbeddingSet};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{load_json, DataSource, RunConfigFile};
use crate::error::{CliError, Result};
use crate::format::{load_embeddings, write_file, EmbeddingFile};
use crate::report::{curves_csv, history_csv, sweep_csv, Report, SweepRow, TrainingInfo, HISTORY_HEADER};

pub const CHECKPOINT: &str = "checkpoint.calm";
pub const HISTORY: &str = "history.csv";
pub const REPORT: &str = "report.json";
pub const CURVES: &str = "curves.csv";
pub const ENCODER: &str = "encoder.json";
pub const METADATA: &str = "metadata.json";
pub const DIAGNOSTIC: &str = "diagnostic.json";
pub const SWEEP: &str = "sweep.csv";

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn unix_seconds() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Ground-truth sidecar written next to generated embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaSidecar {
    pub seed: u64,
    pub kappa: Vec<f64>,
    pub centroids: Vec<Vec<f64>>,
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".kappa.json");
    out.with_file_name(name)
}

/// Generates a synthetic dataset and its concentration sidecar.
pub fn cmd_gen(config: &Path, out: &Path, seed: Option<u64>) -> Result<serde_json::Value> {
    let mut cfg: SynthConfig = load_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ds = make_dataset(&cfg)?;
    EmbeddingFile::from_set(&ds.set).write(out)?;
    let sidecar = KappaSidecar {
        seed: cfg.seed,
        kappa: ds.kappa.clone(),
        centroids: ds.centroids.clone(),
    };
    let side = sidecar_path(out);
    write_file(&side, pretty(&sidecar).as_bytes())?;
    Ok(json!({
        "output": out,
        "kappa_sidecar": side,
        "samples": ds.set.len(),
        "classes": ds.kappa.len(),
        "dim": ds.set.dim(),
    }))
}

/// Evaluates an embedding file. Writes the report to `out` (or returns it
/// only) and the utility curves to `curves` when given.
pub fn cmd_eval(input: &Path, cfg: &EvalConfig, out: Option<&Path>, curves: Option<&Path>) -> Result<Report> {
    cfg.validate()?;
    let (_, loaded) = load_embeddings(input)?;
    let r = evaluate(&loaded.set, cfg)?;
    let report = Report::new(&r, cfg, None);
    if let Some(path) = out {
        write_file(path, report.to_json().as_bytes())?;
    }
    if let Some(path) = curves {
        write_file(path, curves_csv(&r).as_bytes())?;
    }
    Ok(report)
}

/// Linear encoder weights, row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderFile {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
}

/// Starting point of a run, with the file the initial embeddings came from.
struct Start {
    model: Model,
    origin: Option<(EmbeddingSet, EmbeddingFile)>,
    first_epoch: usize,
    previous_rows: Vec<String>,
}

fn load_data(source: &DataSource) -> Result<(EmbeddingSet, Option<EmbeddingFile>)> {
    match source {
        DataSource::Synth(s) => Ok((make_dataset(s)?.set, None)),
        DataSource::File(path) => {
            let (file, loaded) = load_embeddings(path)?;
            Ok((loaded.set, Some(file)))
        }
    }
}

/// History rows of an earlier run and the last epoch they record.
fn read_history(path: &Path) -> Result<(Vec<String>, usize)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(CliError::invalid_file(path, "unexpected history header"));
    }
    let rows: Vec<String> = lines.filter(|l| !l.is_empty()).map(str::to_string).collect();
    let last = match rows.last() {
        None => 0,
        Some(row) => row
            .split(',')
            .next()
            .and_then(|e| e.parse::<usize>().ok())
            .ok_or_else(|| CliError::invalid_file(path, format!("bad epoch in row {row:?}")))?,
    };
    Ok((rows, last))
}

fn prepare(cfg: &RunConfigFile) -> Result<Start> {
    let (data, data_file) = load_data(&cfg.data)?;
    let Some(dir) = &cfg.resume_from else {
        let model = Model::new(&data, cfg.train.mode, cfg.train.seed)?;
        let origin = match (cfg.train.mode, data_file) {
            (Mode::FreeEmbedding, Some(file)) => Some((data, file)),
            _ => None,
        };
        return Ok(Start {
            model,
            origin,
            first_epoch: 1,
            previous_rows: Vec::new(),
        });
    };
    let (previous_rows, last) = read_history(&dir.join(HISTORY))?;
    let (model, origin) = match cfg.train.mode {
        Mode::FreeEmbedding => {
            let (file, loaded) = load_embeddings(&dir.join(CHECKPOINT))?;
            if loaded.set.labels() != data.labels() {
                return Err(CliError::InvalidConfig(format!(
                    "checkpoint in {} does not match the configured data",
                    dir.display()
                )));
            }
            (Model::Free(loaded.set.clone()), Some((loaded.set, file)))
        }
        Mode::LinearEncoder { out_dim } => {
            let enc: EncoderFile = load_json(&dir.join(ENCODER))?;
            if enc.out_dim != out_dim || enc.in_dim != data.dim() {
                return Err(CliError::InvalidConfig(format!(
                    "encoder in {} has shape {}x{}, expected {out_dim}x{}",
                    dir.display(),
                    enc.out_dim,
                    enc.in_dim,
                    data.dim()
                )));
            }
            (Model::LinearEncoder(LinearEncoder::with_weights(data, enc.weights, out_dim)?), None)
        }
    };
    Ok(Start {
        model,
        origin,
        first_epoch: last + 1,
        previous_rows,
    })
}

/// A finished training run evaluated on its final embeddings.
pub struct TrainedRun {
    pub outcome: TrainOutcome,
    pub eval: EvalReport,
    pub report: Report,
    pub previous_rows: Vec<String>,
    origin: Option<(EmbeddingSet, EmbeddingFile)>,
}

impl TrainedRun {
    pub fn summary(&self) -> serde_json::Value {
        json!({
            "recall1": self.report.recall_at(1),
            "opis": self.report.opis,
            "epsilon_opis": self.report.epsilon_opis,
            "last_epoch": self.report.training.as_ref().and_then(|t| t.last_epoch),
        })
    }
}

/// Why a run stopped early, plus what it had produced so far.
pub enum RunFailure {
    Cli(CliError),
    Abort(TrainAbort, Vec<String>),
}

impl From<CliError> for RunFailure {
    fn from(e: CliError) -> Self {
        RunFailure::Cli(e)
    }
}

impl From<CalmError> for RunFailure {
    fn from(e: CalmError) -> Self {
        RunFailure::Cli(e.into())
    }
}

/// Trains per `cfg` and evaluates the result. Writes nothing.
pub fn train_and_evaluate(cfg: &RunConfigFile) -> std::result::Result<TrainedRun, RunFailure> {
    cfg.validate()?;
    let start = prepare(cfg)?;
    let outcome = match run_from(start.model, &cfg.train, &cfg.eval, start.first_epoch) {
        Ok(o) => o,
        Err(abort) => return Err(RunFailure::Abort(abort, start.previous_rows)),
    };
    let eval = evaluate(outcome.embeddings(), &cfg.eval)?;
    let last_epoch = outcome
        .history
        .last_epoch()
        .or_else(|| start.first_epoch.checked_sub(1).filter(|&e| e > 0));
    let training = TrainingInfo {
        epochs_run: outcome.history.records.len(),
        last_epoch,
        adacam_lr_scale: outcome.history.adacam_lr_scale,
    };
    let report = Report::new(&eval, &cfg.eval, Some(training));
    Ok(TrainedRun {
        outcome,
        eval,
        report,
        previous_rows: start.previous_rows,
        origin: start.origin,
    })
}

fn write_diagnostic(dir: &Path, abort: &TrainAbort, previous_rows: &[String]) -> Result<PathBuf> {
    let (epoch, step) = match abort.error {
        CalmError::NonFiniteLoss { epoch, step } => (Some(epoch), Some(step)),
        _ => (None, None),
    };
    let partial = abort.partial.as_deref();
    let records = partial.map(|p| p.history.records.as_slice()).unwrap_or_default();
    let (non_finite, max_deviation) = partial
        .map(|p| {
            let set = p.embeddings();
            let bad = set.as_slice().iter().filter(|x| !x.is_finite()).count();
            let dev = set
                .rows()
                .map(|r| (calm_core::sphere::norm(r) - 1.0).abs())
                .fold(0.0_f64, |a, d| if d.is_nan() { f64::INFINITY } else { a.max(d) });
            (bad, dev)
        })
        .unwrap_or((0, 0.0));
    let diag = json!({
        "error": abort.error.kind(),
        "message": abort.error.to_string(),
        "epoch": epoch,
        "step": step,
        "completed_epochs": records.len(),
        "last_loss": records.last().map(|r| r.loss),
        "non_finite_values": non_finite,
        "max_norm_deviation": if max_deviation.is_finite() { json!(max_deviation) } else { json!(null) },
        "history": history_csv(previous_rows, records),
    });
    let path = dir.join(DIAGNOSTIC);
    write_file(&path, pretty(&diag).as_bytes())?;
    Ok(path)
}

/// Writes every artifact of a finished run to `dir`.
pub fn write_run(dir: &Path, run: &TrainedRun, started: f64, config_path: Option<&Path>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let origin = run.origin.as_ref().map(|(s, f)| (s, f));
    EmbeddingFile::from_set_with_origin(run.outcome.embeddings(), origin).write(&dir.join(CHECKPOINT))?;
    write_file(
        &dir.join(HISTORY),
        history_csv(&run.previous_rows, &run.outcome.history.records).as_bytes(),
    )?;
    write_file(&dir.join(REPORT), run.report.to_json().as_bytes())?;
    write_file(&dir.join(CURVES), curves_csv(&run.eval).as_bytes())?;
    if let Model::LinearEncoder(enc) = &run.outcome.model {
        let file = EncoderFile {
            in_dim: enc.features.dim(),
            out_dim: enc.out_dim,
            weights: enc.weights.clone(),
        };
        write_file(&dir.join(ENCODER), pretty(&file).as_bytes())?;
    }
    let metadata = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": config_path,
        "started_unix": started,
        "finished_unix": unix_seconds(),
        "threads": rayon::current_num_threads(),
        "adacam_lr_scale": run.outcome.history.adacam_lr_scale,
    });
    write_file(&dir.join(METADATA), pretty(&metadata).as_bytes())
}

fn load_run_config(path: &Path, out_dir: Option<&Path>, seed: Option<u64>) -> Result<RunConfigFile> {
    let mut cfg: RunConfigFile = load_json(path)?;
    if let Some(dir) = out_dir {
        cfg.output_dir = dir.to_path_buf();
    }
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Trains, evaluates and writes the artifacts. Returns the one-line summary.
pub fn cmd_train(config: &Path, out_dir: Option<&Path>, seed: Option<u64>) -> Result<serde_json::Value> {
    let started = unix_seconds();
    let cfg = load_run_config(config, out_dir, seed)?;
    match train_and_evaluate(&cfg) {
        Ok(run) => {
            write_run(&cfg.output_dir, &run, started, Some(config))?;
            Ok(run.summary())
        }
        Err(RunFailure::Cli(e)) => Err(e),
        Err(RunFailure::Abort(abort, previous)) => {
            let dump = write_diagnostic(&cfg.output_dir, &abort, &previous)?;
            Err(match abort.error {
                error @ CalmError::NonFiniteLoss { .. } => CliError::NonFinite { error, dump },
                other => other.into(),
            })
        }
    }
}

/// Margin grid in canonical order: `m_plus` ascending, then `m_minus` ascending.
pub fn sweep_grid(m_plus: &[f64], m_minus: &[f64]) -> Result<Vec<(f64, f64)>> {
    let canonical = |v: &[f64], name: &str| -> Result<Vec<f64>> {
        if v.is_empty() {
            return Err(CliError::InvalidConfig(format!("{name} list is empty")));
        }
        if let Some(x) = v.iter().find(|&&x| !(x > -1.0 && x < 1.0)) {
            return Err(CliError::InvalidConfig(format!("{name} value {x} outside (-1, 1)")));
        }
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        Ok(v)
    };
    let plus = canonical(m_plus, "m_plus")?;
    let minus = canonical(m_minus, "m_minus")?;
    if minus[minus.len() - 1] >= plus[0] {
        return Err(CliError::InvalidConfig(format!(
            "every m_minus must be below every m_plus (max m_minus {}, min m_plus {})",
            minus[minus.len() - 1],
            plus[0]
        )));
    }
    Ok(plus.iter().flat_map(|&p| minus.iter().map(move |&m| (p, m))).collect())
}

fn sweep_run(cfg: &RunConfigFile, cam: Option<CamConfig>) -> Result<(Option<f64>, f64)> {
    let mut c = cfg.clone();
    c.train.cam = cam;
    c.train.adacam = None;
    c.resume_from = None;
    match train_and_evaluate(&c) {
        Ok(run) => Ok((run.report.recall_at(1), run.report.opis)),
        Err(RunFailure::Cli(e)) => Err(e),
        Err(RunFailure::Abort(abort, _)) => Err(abort.error.into()),
    }
}

/// Baseline (no CAM) plus one full train and evaluation per margin pair. AdaCAM
/// fine-tuning and resumption are disabled for every row.
pub fn cmd_sweep(
    config: &Path,
    m_plus: &[f64],
    m_minus: &[f64],
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<Vec<SweepRow>> {
    let cfg = load_run_config(config, None, seed)?;
    let grid = sweep_grid(m_plus, m_minus)?;
    let template = cfg.train.cam.unwrap_or(CamConfig::new(0.0, 0.0));
    let mut runs: Vec<Option<(f64, f64)>> = vec![None];
    runs.extend(grid.iter().map(|&g| Some(g)));
    let results: Vec<Result<SweepRow>> = runs
        .par_iter()
        .map(|margins| {
            let cam = margins.map(|(p, m)| CamConfig {
                m_plus: p,
                m_minus: m,
                ..template
            });
            let (recall1, opis) = sweep_run(&cfg, cam)?;
            Ok(SweepRow {
                run: if cam.is_some() { "cam" } else { "baseline" }.into(),
                m_plus: margins.map(|g| g.0),
                m_minus: margins.map(|g| g.1),
                recall1,
                opis,
            })
        })
        .collect();
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join(SWEEP));
    write_file(&path, sweep_csv(&rows).as_bytes())?;
    Ok(rows)
}
