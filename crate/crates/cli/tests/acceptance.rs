//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! The pipeline criteria run the `toy` preset end to end twice (the second
//! run checks determinism) plus once more with `omega_d = 0`. Set
//! `PRIVAD_ACCEPTANCE_DIR` to keep the run directories.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use privad::evaluation::MetricRecord;
use privad_cli::{Method, Pipeline, RunConfig};

#[allow(dead_code)]
#[path = "../../core/tests/loss_oracles.rs"]
mod loss_oracles;

#[allow(dead_code)]
#[path = "../../core/tests/gradcheck.rs"]
mod gradcheck;

#[allow(dead_code)]
#[path = "../../core/tests/metric_oracles.rs"]
mod metric_oracles;

/// Pilot-fixed thresholds; the README lists the same values.
const PRETRAIN_L1_MAX: f64 = 0.05;
const CMAP_DROP_MIN: f64 = 0.10;
const ACTION_GAP_MAX: f64 = 0.10;
const MINIMAX_BUDGET: Duration = Duration::from_secs(20 * 60);
const OMEGA_AUC_SLACK: f64 = 0.02;
const AD_AUC_MIN: f64 = 0.80;
const PRIOR_TOLERANCE: f64 = 0.05;
const LOSS_BUDGET: Duration = Duration::from_secs(10);
const GRAD_BUDGET: Duration = Duration::from_secs(120);

struct Outcome {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Runs `f`, turning a panic into a failed outcome.
fn suite(budget: Option<Duration>, f: impl FnOnce()) -> Outcome {
    let t = Instant::now();
    let caught = panic::catch_unwind(AssertUnwindSafe(f));
    let took = t.elapsed();
    match caught {
        Ok(()) => {
            let limit = budget.map_or(String::new(), |b| format!(" (budget {b:?})"));
            verdict(budget.is_none_or(|b| took < b), format!("{:.2}s{limit}", took.as_secs_f64()))
        }
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        }
    }
}

/// Metrics gathered from one toy run, keyed `stage:metric`.
#[derive(Default)]
struct Run {
    metrics: BTreeMap<String, f64>,
    minimax_time: Duration,
}

impl Run {
    fn get(&self, key: &str) -> f64 {
        *self.metrics.get(key).unwrap_or_else(|| panic!("metric {key} not recorded"))
    }
}

fn take(run: &mut Run, stage: &str, records: &[MetricRecord]) {
    for r in records {
        run.metrics.insert(format!("{stage}:{}", r.metric), r.value);
    }
}

fn toy(dir: &Path, omega_d: Option<f64>) -> RunConfig {
    let mut cfg = RunConfig::preset("toy").expect("toy preset parses");
    cfg.output_dir = dir.to_path_buf();
    if let Some(w) = omega_d {
        cfg.train.loss.omega_d = w;
    }
    cfg
}

/// The full pipeline, stage by stage, timing the ones the minimax check needs.
fn full_run(dir: &Path) -> privad::Result<Run> {
    let p = Pipeline::new(toy(dir, None));
    let mut run = Run::default();
    let timed = |run: &mut Run, f: &mut dyn FnMut() -> privad::Result<Vec<MetricRecord>>| -> privad::Result<Vec<MetricRecord>> {
        let t = Instant::now();
        let r = f();
        run.minimax_time += t.elapsed();
        r
    };
    let t = Instant::now();
    p.gen_data()?;
    run.minimax_time += t.elapsed();
    let r = timed(&mut run, &mut || p.pretrain_anon())?;
    take(&mut run, "pretrain", &r);
    let r = timed(&mut run, &mut || p.train_anon())?;
    take(&mut run, "anon", &r);
    for m in Method::all() {
        p.extract_features(m)?;
        let r = p.train_ad(m)?;
        take(&mut run, &format!("train-ad/{m}"), &r);
        let r = p.eval_ad(m)?;
        take(&mut run, &format!("ad/{m}"), &r);
        let r = if matches!(m, Method::Raw | Method::Anon) {
            timed(&mut run, &mut || p.eval_privacy(m))?
        } else {
            p.eval_privacy(m)?
        };
        take(&mut run, &format!("privacy/{m}"), &r);
    }
    let r = p.probe_features()?;
    take(&mut run, "probe", &r);
    p.report()?;
    Ok(run)
}

/// Minimax plus the anonymized anomaly branch with `omega_d = 0`.
fn ablation_run(dir: &Path) -> privad::Result<Run> {
    let p = Pipeline::new(toy(dir, Some(0.0)));
    let mut run = Run::default();
    p.gen_data()?;
    p.pretrain_anon()?;
    let r = p.train_anon()?;
    take(&mut run, "anon", &r);
    p.extract_features(Method::Anon)?;
    p.train_ad(Method::Anon)?;
    let r = p.eval_ad(Method::Anon)?;
    take(&mut run, "ad/anon", &r);
    Ok(run)
}

/// Every file under `metrics/` and `reports/`, by relative path.
fn metric_files(run_dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["metrics", "reports"] {
        let dir = run_dir.join(sub);
        let Ok(entries) = std::fs::read_dir(&dir) else { continue };
        for e in entries.flatten() {
            let path = e.path();
            out.insert(path.strip_prefix(run_dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
        }
    }
    out
}

fn pipeline_criteria(root: &Path) -> BTreeMap<u32, Outcome> {
    let mut out = BTreeMap::new();
    let (dir_a, dir_b, dir_c) = (root.join("toy_a"), root.join("toy_b"), root.join("toy_omega0"));
    let runs = full_run(&dir_a).and_then(|a| Ok((a, full_run(&dir_b)?, ablation_run(&dir_c)?)));
    let (a, _, c) = match runs {
        Ok(r) => r,
        Err(e) => {
            for id in 4..=9 {
                out.insert(id, verdict(false, format!("pipeline failed: {e}")));
            }
            out.insert(11, verdict(false, format!("pipeline failed: {e}")));
            return out;
        }
    };
    let check = |f: &dyn Fn() -> Outcome| panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| verdict(false, "metric missing".into()));

    out.insert(
        4,
        check(&|| {
            let l1 = a.get("pretrain:heldout_l1");
            verdict(l1 < PRETRAIN_L1_MAX, format!("held-out L1 {l1:.4} (< {PRETRAIN_L1_MAX})"))
        }),
    );
    out.insert(
        5,
        check(&|| {
            let (raw, anon) = (a.get("privacy/raw:cmap"), a.get("privacy/anon:cmap"));
            let (acc_raw, acc_anon) = (a.get("anon:action_accuracy_raw"), a.get("anon:action_accuracy_anon"));
            let pass = raw - anon >= CMAP_DROP_MIN && (acc_raw - acc_anon).abs() <= ACTION_GAP_MAX && a.minimax_time <= MINIMAX_BUDGET;
            verdict(
                pass,
                format!(
                    "attack cMAP raw {raw:.4} anon {anon:.4} (drop >= {CMAP_DROP_MIN}); action accuracy raw {acc_raw:.4} anon {acc_anon:.4} (gap <= {ACTION_GAP_MAX}); {:.0}s",
                    a.minimax_time.as_secs_f64()
                ),
            )
        }),
    );
    out.insert(
        6,
        check(&|| {
            let (d1, d0) = (a.get("anon:intra_video_distance_anon"), c.get("anon:intra_video_distance_anon"));
            let (auc1, auc0) = (a.get("ad/anon:frame_auc"), c.get("ad/anon:frame_auc"));
            verdict(
                d1 > d0 && auc1 >= auc0 - OMEGA_AUC_SLACK,
                format!("distance omega_d=0.1 {d1:.4} vs 0 {d0:.4}; AUC {auc1:.4} vs {auc0:.4} (slack {OMEGA_AUC_SLACK})"),
            )
        }),
    );
    out.insert(
        7,
        check(&|| {
            let (anon, raw) = (a.get("ad/anon:frame_auc"), a.get("ad/raw:frame_auc"));
            let epochs = a.get("train-ad/anon:epochs_run");
            verdict(
                anon >= AD_AUC_MIN,
                format!("frame AUC anon {anon:.4} (>= {AD_AUC_MIN}) after {epochs} epochs; raw {raw:.4}"),
            )
        }),
    );
    out.insert(
        8,
        check(&|| {
            let (raw, anon) = (a.get("probe:probe_cmap_raw"), a.get("probe:probe_cmap_anon"));
            verdict(raw > anon, format!("probe cMAP raw {raw:.4} anon {anon:.4}"))
        }),
    );
    out.insert(
        9,
        check(&|| {
            let all = a.get("privacy/blacken_all:cmap");
            let prior = a.get("privacy/blacken_all:prior_cmap");
            let (ds2, ds4) = (a.get("privacy/downsample2:cmap"), a.get("privacy/downsample4:cmap"));
            verdict(
                (all - prior).abs() <= PRIOR_TOLERANCE && ds4 < ds2,
                format!("blacken_all {all:.4} vs prior {prior:.4} (tol {PRIOR_TOLERANCE}); downsample4 {ds4:.4} < downsample2 {ds2:.4}"),
            )
        }),
    );

    let (fa, fb) = (metric_files(&dir_a), metric_files(&dir_b));
    let differing: Vec<String> = fa
        .keys()
        .chain(fb.keys())
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    out.insert(
        11,
        verdict(
            !fa.is_empty() && differing.is_empty(),
            if differing.is_empty() {
                format!("{} metric and report files identical", fa.len())
            } else {
                format!("differ: {}", differing.join(", "))
            },
        ),
    );
    out
}

fn main() {
    // libtest flags such as `--nocapture` are accepted and ignored; a name
    // filter skips the run unless it matches.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }

    let mut results: BTreeMap<u32, Outcome> = BTreeMap::new();
    results.insert(
        1,
        suite(Some(LOSS_BUDGET), || {
            loss_oracles::hand_derived_anchors();
            loss_oracles::every_loss_matches_its_oracle();
        }),
    );
    results.insert(
        2,
        suite(Some(GRAD_BUDGET), || {
            gradcheck::loss_gradients_match_finite_differences();
            gradcheck::model_gradients_match_finite_differences();
        }),
    );
    results.insert(
        3,
        suite(None, || {
            metric_oracles::auc_equals_the_pairwise_oracle();
            metric_oracles::average_precision_hand_ranked_cases();
            metric_oracles::cmap_is_the_mean_of_per_class_ap();
            metric_oracles::auc_is_invariant_under_monotone_maps();
        }),
    );
    results.insert(10, suite(None, metric_oracles::report_reproduces_reference_relative_changes));

    let kept = std::env::var_os("PRIVAD_ACCEPTANCE_DIR").map(PathBuf::from);
    let temp = tempfile::tempdir().expect("temp dir");
    let root = kept.clone().unwrap_or_else(|| temp.path().to_path_buf());
    results.extend(pipeline_criteria(&root));

    let names = [
        "loss oracles",
        "gradient check",
        "metric oracles",
        "identity pretraining",
        "minimax privacy/utility",
        "temporal distinctiveness",
        "anomaly pipeline",
        "feature leakage",
        "baseline ordering",
        "report arithmetic",
        "determinism",
    ];
    let mut failed = 0;
    for (id, o) in &results {
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {:>2} {:<26} {}",
            if o.pass { "PASS" } else { "FAIL" },
            id,
            names[*id as usize - 1],
            o.detail
        );
    }
    if let Some(dir) = kept {
        println!("run directories kept under {}", dir.display());
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
