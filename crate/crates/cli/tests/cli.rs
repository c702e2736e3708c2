use std::path::Path;
use std::process::{Command, Output};

fn privad(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privad"))
        .args(["--preset", "tiny", "--output"])
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "failed: {}", stderr(&o));
    o
}

fn prepare_features(dir: &Path) {
    for args in [
        &["gen-data"][..],
        &["pretrain-anon"],
        &["train-anon"],
        &["extract-features", "--raw"],
        &["extract-features", "--anon"],
    ] {
        ok(privad(dir, args));
    }
}

#[test]
fn stages_refuse_to_run_before_their_producer() {
    let dir = tempfile::tempdir().unwrap();
    let o = privad(dir.path(), &["eval-ad", "--features", "anon"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("missing artifact"), "{}", stderr(&o));

    ok(privad(dir.path(), &["gen-data"]));
    let o = privad(dir.path(), &["train-anon"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("privad pretrain-anon"), "{}", stderr(&o));
}

#[test]
fn modified_or_reconfigured_inputs_are_stale() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare_features(d);
    ok(privad(d, &["train-ad", "--features", "raw"]));

    let feats = d.join("features/raw/anomaly_train");
    let first = std::fs::read_dir(&feats).unwrap().next().unwrap().unwrap().path();
    let mut bytes = std::fs::read(&first).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&first, bytes).unwrap();
    for args in [&["train-ad", "--features", "raw"][..], &["eval-ad", "--features", "raw"]] {
        let o = privad(d, args);
        assert_eq!(o.status.code(), Some(3), "{args:?}");
        assert!(stderr(&o).contains("stale artifact"), "{}", stderr(&o));
        assert!(stderr(&o).contains("extract-features --raw"), "{}", stderr(&o));
    }

    // Re-extraction restores the recorded bytes.
    ok(privad(d, &["extract-features", "--raw"]));
    let o = privad(d, &["eval-ad", "--features", "raw"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let cfg = d.join("other.toml");
    let text = privad_cli::RunConfig::preset_text("tiny").unwrap().replace("seed = 3", "seed = 4");
    std::fs::write(&cfg, text).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_privad"))
        .arg("--config")
        .arg(&cfg)
        .arg("--output")
        .arg(d)
        .args(["eval-ad", "--features", "raw"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("different configuration"), "{}", stderr(&o));
}

#[test]
fn upstream_rerun_invalidates_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare_features(d);
    ok(privad(d, &["train-ad", "--features", "anon"]));
    // A second extraction rewrites identical bytes, so the digest holds.
    ok(privad(d, &["extract-features", "--anon"]));
    ok(privad(d, &["eval-ad", "--features", "anon"]));

    std::fs::remove_file(d.join("checkpoints/anomaly_head_anon.ckpt")).unwrap();
    let o = privad(d, &["eval-ad", "--features", "anon"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("deleted"), "{}", stderr(&o));
}

#[test]
fn full_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let methods = "--methods=raw,anon,blur";
    let ra = ok(privad(a.path(), &["run", methods]));
    let rb = ok(privad(b.path(), &["run", methods]));
    assert_eq!(ra.stdout, rb.stdout);
    let report = String::from_utf8(ra.stdout).unwrap();
    assert!(report.starts_with("method,cmap,frame_auc,"), "{report}");
    assert_eq!(report.lines().count(), 4);
    for rel in [
        "reports/report.csv",
        "reports/report.json",
        "metrics/eval-ad__anon.json",
        "metrics/eval-privacy__anon.json",
        "metrics/train-anon.json",
        "metrics/probe-features.json",
        "checkpoints/anonymizer.ckpt",
    ] {
        let x = std::fs::read(a.path().join(rel)).unwrap();
        let y = std::fs::read(b.path().join(rel)).unwrap();
        assert_eq!(x, y, "{rel}");
    }

    let id = "ano_00000";
    let o = ok(privad(a.path(), &["plot-scores", id, "--features", "anon"]));
    assert!(String::from_utf8_lossy(&o.stdout).contains(&format!("{id}_anon.svg")));
    let csv = std::fs::read_to_string(a.path().join(format!("plots/{id}_anon.csv"))).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert!(!row[2].is_empty(), "raw overlay expected: {csv}");
}

#[test]
fn configuration_problems_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = privad(dir.path(), &["eval-privacy", "--transform", "sepia"]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\n[train]\nanon_epoch = 3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_privad"))
        .arg("--config")
        .arg(&bad)
        .arg("gen-data")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("anon_epoch"), "{}", stderr(&o));

    let o = Command::new(env!("CARGO_BIN_EXE_privad")).arg("gen-data").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_privad")).arg("extract-features").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn presets_print_and_help_lists_every_stage() {
    let o = Command::new(env!("CARGO_BIN_EXE_privad")).args(["config", "toy"]).output().unwrap();
    assert!(o.status.success());
    privad_cli::RunConfig::from_toml_str(&String::from_utf8(o.stdout).unwrap()).unwrap();

    let o = Command::new(env!("CARGO_BIN_EXE_privad")).arg("--help").output().unwrap();
    let help = String::from_utf8(o.stdout).unwrap();
    for cmd in [
        "gen-data",
        "pretrain-anon",
        "train-anon",
        "extract-features",
        "train-ad",
        "eval-ad",
        "eval-privacy",
        "probe-features",
        "report",
        "plot-scores",
    ] {
        assert!(help.contains(cmd), "{cmd} missing from help");
    }
}
