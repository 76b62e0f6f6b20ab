//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use calm_cli::commands::{cmd_sweep, train_and_evaluate, RunFailure, TrainedRun, REPORT};
use calm_cli::config::{load_json, RunConfigFile};
use calm_core::losses::{
    batch_triplets, cam_loss, contrastive_loss, triplet_loss, CamConfig, PairLoss,
};
use calm_core::metrics::{self, calibration_range_from_far, class_curves, utility, utility_curve, CurveOwner};
use calm_core::pairs::{
    batch_pairs, enumerate_positive_pairs, sample_negative_pairs, score_pairs, ScoredPairSet,
};
use calm_core::synth::{make_dataset, sample_vmf, KappaSpec, Placement, SynthConfig};
use calm_core::trainer::Phase;
use calm_core::vmf::{adaptive_margins, epoch_refresh, estimate_kappa, vmf_weight, ClassMeanTable, RefreshConfig};
use calm_core::{CalmError, EmbeddingSet};
use common::{clustered_set, directional_fd, inner, oracle, random_unit, rel_err, rng, tangent_direction};
use rand::Rng;
use rand_xoshiro::SplitMix64;
use tempfile::TempDir;

type Outcome = Result<String, String>;
/// Name, wall-clock budget in seconds, check.
type Criterion = (&'static str, Option<u64>, fn() -> Outcome);

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn shipped(name: &str, seed: u64) -> RunConfigFile {
    let mut cfg: RunConfigFile = load_json(&configs().join(name)).expect("shipped config parses");
    cfg.override_seed(seed);
    cfg
}

fn trained(cfg: &RunConfigFile) -> Result<TrainedRun, String> {
    train_and_evaluate(cfg).map_err(|e| match e {
        RunFailure::Cli(e) => e.to_string(),
        RunFailure::Abort(a, _) => a.error.to_string(),
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn opis_oracle() -> Outcome {
    let mut r = rng(7001);
    let (mut compared, mut worst) = (0, 0.0_f64);
    while compared < 100 {
        let t = r.random_range(2..=6);
        let n = r.random_range(2 * t..=60);
        let m = r.random_range(2..=8);
        let set = clustered_set(&mut r, n, t, m);
        let g = r.random_range(2..=64);
        let c = [0.5, 1.0, 2.0][r.random_range(0..3)];
        let eps = [10.0, 20.0, 50.0, r.random_range(1.0..100.0)];
        let pairs = enumerate_positive_pairs(&set)
            .merge(sample_negative_pairs(&set, r.random_range(1..=10), r.random()).map_err(|e| e.to_string())?);
        let expected = oracle::evaluate(&set, pairs.entries(), 1e-2, 1e-1, g, c, &eps);
        let scored = score_pairs(&set, &pairs).map_err(|e| e.to_string())?;
        let got = calibration_range_from_far(&scored, 1e-2, 1e-1).and_then(|range| {
            let pooled = utility_curve(&scored, CurveOwner::Pooled, &range, g, c)?;
            let (curves, _) = class_curves(&scored, &range, g, c)?;
            let opis = metrics::opis(&curves, &pooled, None)?.opis;
            let eo = eps
                .iter()
                .map(|&e| metrics::epsilon_opis(&scored, &curves, e, c))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((opis, eo))
        });
        match (expected, got) {
            (None, Err(CalmError::DegenerateRange { .. })) => {}
            (Some(e), Ok((opis, eo))) => {
                worst = worst.max(rel_err(opis, e.opis, 1e-300));
                for (a, b) in eo.iter().zip(&e.epsilon_opis) {
                    worst = worst.max(rel_err(*a, *b, 1e-300));
                }
                compared += 1;
            }
            (e, l) => return Err(format!("degeneracy disagrees: oracle {:?}, library {:?}", e.is_some(), l.err())),
        }
    }
    check(worst <= 1e-9, || format!("worst relative error {worst:e}"))?;
    Ok(format!("100 instances, worst relative error {worst:.1e}"))
}

fn edge_identities() -> Outcome {
    for p in [0.0, 0.25, 0.5, 1.0] {
        let u = utility(p, p, 1.0);
        check(u == p, || format!("U({p}, {p}, 1) = {u}"))?;
    }
    let mut r = rng(7002);
    for _ in 0..20 {
        let set = clustered_set(&mut r, 40, 5, 6);
        let pairs = enumerate_positive_pairs(&set).merge(sample_negative_pairs(&set, 5, r.random()).unwrap());
        let scored = score_pairs(&set, &pairs).unwrap();
        let Ok(range) = calibration_range_from_far(&scored, 1e-2, 1e-1) else { continue };
        let (curves, _) = class_curves(&scored, &range, 32, 1.0).unwrap();
        let e = metrics::epsilon_opis(&scored, &curves, 100.0, 1.0).unwrap();
        check(e == 0.0, || format!("epsilon-OPIS(100) = {e}"))?;
    }
    Ok("U(p, p, 1) = p and epsilon-OPIS(100) = 0".into())
}

const STEP: f64 = 1e-6;
const KINK_GUARD: f64 = 1e-4;

fn random_batch(r: &mut SplitMix64) -> EmbeddingSet {
    let t = r.random_range(2..=5);
    let n = r.random_range(2 * t..=32);
    let m = r.random_range(2..=16);
    clustered_set(r, n, t, m)
}

fn gradient_error(r: &mut SplitMix64, set: &EmbeddingSet, loss: &dyn Fn(&EmbeddingSet) -> PairLoss) -> f64 {
    let analytic = loss(set).embedding_grad(set).grad;
    let value = |s: &EmbeddingSet| loss(s).value;
    let norm = inner(&analytic, &analytic).sqrt();
    let mut dirs = vec![tangent_direction(r, set), tangent_direction(r, set)];
    if norm > 0.0 {
        dirs.push(analytic.iter().map(|g| g / norm).collect());
    }
    dirs.iter()
        .map(|d| rel_err(inner(&analytic, d), directional_fd(set, d, STEP, &value), 1e-3))
        .fold(0.0, f64::max)
}

fn gradients() -> Outcome {
    let mut r = rng(7003);
    let near = |s: f64, m: f64| (s - m).abs() < KINK_GUARD;
    let all = |set: &EmbeddingSet| batch_pairs(set, &(0..set.len()).collect::<Vec<_>>()).unwrap();
    let mut worst = [0.0_f64; 3];

    let mut done = 0;
    while done < 100 {
        let set = random_batch(&mut r);
        let mp = r.random_range(0.0..0.9);
        let cfg = CamConfig::new(mp, mp - r.random_range(0.1..0.8));
        let pairs = all(&set);
        let scored = score_pairs(&set, &pairs).unwrap();
        if scored.entries().iter().any(|e| near(e.similarity, cfg.m_plus) || near(e.similarity, cfg.m_minus)) {
            continue;
        }
        let err = gradient_error(&mut r, &set, &|s| cam_loss(&score_pairs(s, &pairs).unwrap(), &cfg, None));
        worst[0] = worst[0].max(err);
        done += 1;
    }
    done = 0;
    while done < 100 {
        let set = random_batch(&mut r);
        let margin = r.random_range(-0.5..0.8);
        let pairs = all(&set);
        let scored = score_pairs(&set, &pairs).unwrap();
        if scored.negatives().any(|e| near(e.similarity, margin)) {
            continue;
        }
        let err = gradient_error(&mut r, &set, &|s| contrastive_loss(&score_pairs(s, &pairs).unwrap(), margin));
        worst[1] = worst[1].max(err);
        done += 1;
    }
    done = 0;
    while done < 100 {
        let set = random_batch(&mut r);
        let margin = r.random_range(0.05..0.5);
        let triplets = batch_triplets(&set, &(0..set.len()).collect::<Vec<_>>());
        let kink = triplets
            .iter()
            .any(|t| near(set.similarity(t.anchor, t.negative) - set.similarity(t.anchor, t.positive), -margin));
        if triplets.is_empty() || kink {
            continue;
        }
        let err = gradient_error(&mut r, &set, &|s| triplet_loss(s, &triplets, margin).unwrap());
        worst[2] = worst[2].max(err);
        done += 1;
    }
    check(worst.iter().all(|&w| w <= 1e-5), || format!("worst relative errors {worst:?}"))?;
    Ok(format!(
        "100 batches each; worst relative error CAM {:.1e}, contrastive {:.1e}, triplet {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

fn boundary_semantics() -> Outcome {
    // one positive pair and two orthogonal negatives
    let set = EmbeddingSet::new(vec![1.0, 0.0, 0.0, 0.6, 0.8, 0.0, 0.0, 0.0, 1.0], vec![0, 0, 1], 3)
        .map_err(|e| e.to_string())?;
    let scored = score_pairs(&set, &batch_pairs(&set, &[0, 1, 2]).unwrap()).unwrap();
    let s_pos = scored.positives().next().unwrap().similarity;
    check(scored.negatives().all(|e| e.similarity == 0.0), || "fixture negatives are not orthogonal".into())?;
    let cfg = CamConfig::new(s_pos, 0.0);
    let l = cam_loss(&scored, &cfg, None);
    check((l.selected_positive, l.selected_negative) == (1, 2), || {
        format!("selected {} positive, {} negative", l.selected_positive, l.selected_negative)
    })?;
    check(l.value == 0.0, || format!("boundary pairs contribute {}", l.value))?;
    let empty = cam_loss(&ScoredPairSet::default(), &cfg, None);
    check(empty.value == 0.0 && empty.sim_grads.is_empty(), || "empty input is not 0".into())?;
    let unselected = ScoredPairSet::from_similarities(&[(0, true, 0.9), (0, false, -0.9)]);
    let none = cam_loss(&unselected, &CamConfig::new(0.5, 0.0), None);
    check(none.value == 0.0 && none.selected_positive + none.selected_negative == 0, || {
        "empty selection is not 0".into()
    })?;
    Ok("pairs at s = m+ and s = m- selected with value 0; empty selection gives 0".into())
}

fn vmf_round_trip() -> Outcome {
    let mut worst = 0.0_f64;
    for (k, &kappa) in [5.0, 20.0, 100.0].iter().enumerate() {
        for (d, &dim) in [4usize, 8, 16].iter().enumerate() {
            let mut r = rng(7100 + 10 * k as u64 + d as u64);
            let mu = random_unit(&mut r, dim);
            let xs = sample_vmf(&mu, kappa, 10_000, &mut r).map_err(|e| e.to_string())?;
            let mut sum = vec![0.0; dim];
            for x in &xs {
                sum.iter_mut().zip(x).for_each(|(s, v)| *s += v);
            }
            let r_bar = sum.iter().map(|s| s * s).sum::<f64>().sqrt() / xs.len() as f64;
            let est = estimate_kappa(r_bar, dim).map_err(|e| e.to_string())?;
            let err = (est - kappa).abs() / kappa;
            check(err <= 0.05, || format!("kappa {kappa}, M {dim}: estimate {est}"))?;
            worst = worst.max(err);
        }
    }
    Ok(format!("9 combinations, worst relative error {:.2}%", 100.0 * worst))
}

fn adaptive_margin_identities() -> Outcome {
    let mut r = rng(7004);
    for _ in 0..200 {
        let t = r.random_range(1..=50);
        let m_plus = r.random_range(-0.9..0.95);
        let w: Vec<f64> = (0..t).map(|_| vmf_weight(r.random_range(-1.0..=1.0))).collect();
        let m = adaptive_margins(&w, m_plus).map_err(|e| e.to_string())?;
        let mean = m.iter().sum::<f64>() / t as f64;
        check((mean - m_plus).abs() <= 1e-9, || format!("mean {mean} vs m+ {m_plus}"))?;
    }

    let mut r = rng(7005);
    let block: Vec<f64> = (0..10).flat_map(|_| random_unit(&mut r, 5)).collect();
    let data: Vec<f64> = (0..4).flat_map(|_| block.clone()).collect();
    let labels: Vec<u32> = (0..4).flat_map(|j| vec![j; 10]).collect();
    let set = EmbeddingSet::new(data, labels, 5).unwrap();
    let mut table = ClassMeanTable::new(5);
    table.update_all(&set);
    let state = epoch_refresh(&mut table, &RefreshConfig::new(0.63), None).map_err(|e| e.to_string())?;
    check(state.classes.iter().all(|c| c.m_plus == 0.63), || "homogeneous margins differ from m+".into())?;

    let ds = make_dataset(&SynthConfig {
        classes: 2,
        kappa: KappaSpec::Fixed(vec![5.0, 100.0]),
        samples_per_class: 500,
        dim: 8,
        placement: Placement::Uniform,
        placement_kappa: 30.0,
        hubs: 3,
        seed: 3,
    })
    .unwrap();
    let mut table = ClassMeanTable::new(8);
    table.update_all(&ds.set);
    let m: BTreeMap<u32, f64> = epoch_refresh(&mut table, &RefreshConfig::new(0.6), None)
        .map_err(|e| e.to_string())?
        .margins();
    check(m[&1] < m[&0], || format!("margins {m:?}"))?;
    Ok(format!("mean = m+, homogeneous = m+, margins {:.3} (kappa 100) < {:.3} (kappa 5)", m[&1], m[&0]))
}

fn desk_scale_cam() -> Outcome {
    let (mut reduction, mut delta) = (vec![], vec![]);
    for seed in 0..5 {
        let base = trained(&shipped("demo_baseline.json", seed))?.report;
        let cam = trained(&shipped("demo_cam.json", seed))?.report;
        reduction.push(1.0 - cam.opis / base.opis);
        delta.push(cam.recall_at(1).unwrap() - base.recall_at(1).unwrap());
    }
    let (red, d) = (median(reduction), median(delta));
    check(red >= 0.30 && d >= -0.01, || format!("median OPIS reduction {red:.3}, median recall@1 change {d:+.4}"))?;
    Ok(format!("median OPIS reduction {:.1}%, median recall@1 change {:+.2}pp", 100.0 * red, 100.0 * d))
}

fn margin_sweep() -> Outcome {
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let rows = cmd_sweep(
        &configs().join("demo_cam.json"),
        &[0.5, 0.6, 0.7],
        &[0.0, 0.1, 0.2],
        Some(&tmp.path().join("sweep.csv")),
        Some(0),
    )
    .map_err(|e| e.to_string())?;
    check(rows.len() == 10 && rows[0].run == "baseline", || format!("{} rows", rows.len()))?;
    let base = rows[0].opis;
    let worst = rows[1..].iter().map(|r| r.opis).fold(0.0, f64::max);
    check(worst < base, || format!("worst CAM OPIS {worst:e} vs baseline {base:e}"))?;
    Ok(format!("9/9 below baseline; worst CAM OPIS {worst:.3e} vs baseline {base:.3e}"))
}

fn adacam_direction() -> Outcome {
    let (mut wins, mut worst) = (0, f64::NEG_INFINITY);
    for seed in 0..5 {
        let cfg = shipped("demo_adacam.json", seed);
        let ada = cfg.train.adacam.ok_or("shipped config has no AdaCAM section")?;
        check(ada.finetune_epochs == 30, || format!("{} fine-tune epochs", ada.finetune_epochs))?;
        let run = trained(&cfg)?;
        let checkpoint = run
            .outcome
            .history
            .records
            .iter()
            .rev()
            .find(|r| r.phase == Phase::Train)
            .ok_or("no CAM epochs")?;
        let (cam_r1, cam_opis) = (checkpoint.recall1.ok_or("unevaluated")?, checkpoint.opis.ok_or("unevaluated")?);
        if run.report.recall_at(1).unwrap() >= cam_r1 {
            wins += 1;
        }
        worst = worst.max(run.report.opis / cam_opis - 1.0);
    }
    check(wins >= 3 && worst <= 0.5, || format!("{wins}/5 recall wins, worst OPIS change {worst:+.3}"))?;
    Ok(format!("recall@1 kept or improved on {wins}/5 seeds, worst OPIS change {:+.1}%", 100.0 * worst))
}

fn determinism() -> Outcome {
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_calm");
    let cfg = configs().join("demo_cam.json");
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin).current_dir(tmp.path()).args(args).output().map_err(|e| e.to_string())?;
        check(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())
    };
    for dir in ["a", "b"] {
        run(&["train", cfg.to_str().unwrap(), "--out-dir", dir, "--seed", "4"])?;
    }
    for name in ["a", "b"] {
        run(&["eval", "a/checkpoint.calm", "--seed", "4", "--out", &format!("eval_{name}.json")])?;
    }
    let same = |x: &str, y: &str| fs::read(tmp.path().join(x)).ok() == fs::read(tmp.path().join(y)).ok();
    for f in [REPORT, "history.csv", "checkpoint.calm", "curves.csv"] {
        check(same(&format!("a/{f}"), &format!("b/{f}")), || format!("train {f} differs"))?;
    }
    check(same("eval_a.json", "eval_b.json"), || "eval report differs".into())?;
    check(same("eval_a.curves.csv", "eval_b.curves.csv"), || "eval curves differ".into())?;
    Ok("train and eval outputs byte-identical across reruns".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("OPIS oracle equivalence", Some(10), opis_oracle),
        ("utility and epsilon edge identities", None, edge_identities),
        ("gradient correctness", Some(30), gradients),
        ("CAM boundary semantics", None, boundary_semantics),
        ("vMF round trip", Some(20), vmf_round_trip),
        ("adaptive margin identities", None, adaptive_margin_identities),
        ("desk-scale CAM claim", Some(300), desk_scale_cam),
        ("margin-sweep robustness", Some(900), margin_sweep),
        ("AdaCAM direction", Some(300), adacam_direction),
        ("determinism", None, determinism),
    ];
    let mut failed = 0;
    for (k, (name, budget, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let outcome = match (outcome, budget) {
            (Ok(msg), Some(b)) if took > Duration::from_secs(*b) => Err(format!("{msg}; exceeded {b} s budget")),
            (o, _) => o,
        };
        match outcome {
            Ok(msg) => println!("PASS [{:>2}] {name}: {msg} ({:.2} s)", k + 1, took.as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("FAIL [{:>2}] {name}: {msg} ({:.2} s)", k + 1, took.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
