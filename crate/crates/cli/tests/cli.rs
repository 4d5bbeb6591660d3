use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = "[scene]\npairs = 3\nsplit_ratio = 0.67\n\n[cf]\nk_cf = 1\nsteps = 4\n";

fn mfid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfid"))
        .args(args)
        .current_dir(dir)
        .env("MFID_CACHE_DIR", dir.join("cache"))
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = mfid(dir, args);
    assert!(out.status.success(), "mfid {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn generate_splits_twenty_pairs_sixteen_four() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "[scene]\npairs = 20\n").unwrap();
    ok(dir.path(), &["--config", "run.toml", "generate", "--out", "data"]);
    let m = json(&dir.path().join("data/manifest.json"));
    let records = m["records"].as_array().unwrap();
    let count = |s: &str| records.iter().filter(|r| r["split"] == s).count();
    assert_eq!((records.len(), count("calibration"), count("heldout")), (20, 16, 4));
    for r in records {
        assert!(dir.path().join("data").join(r["real"].as_str().unwrap()).exists());
        assert!(dir.path().join("data").join(r["synthetic"].as_str().unwrap()).exists());
    }
    assert_eq!(m["toolkit_version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn seed_flag_changes_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
    ok(dir.path(), &["--config", "run.toml", "generate", "--out", "a"]);
    ok(dir.path(), &["--config", "run.toml", "--seed", "5", "generate", "--out", "b"]);
    let (a, b) = (json(&dir.path().join("a/manifest.json")), json(&dir.path().join("b/manifest.json")));
    assert_ne!(a["config_hash"], b["config_hash"]);
    assert_ne!(a["records"][0]["sd"], b["records"][0]["sd"]);
}

#[test]
fn identity_manifest_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
    ok(dir.path(), &["--config", "run.toml", "generate", "--out", "data"]);
    let path = dir.path().join("data/manifest.json");
    let mut m = json(&path);
    for r in m["records"].as_array_mut().unwrap() {
        r["synthetic"] = r["real"].clone();
    }
    std::fs::write(&path, serde_json::to_vec_pretty(&m).unwrap()).unwrap();
    ok(dir.path(), &["--config", "run.toml", "evaluate", "--manifest", "data/manifest.json", "--out", "eval"]);
    let csv = std::fs::read_to_string(dir.path().join("eval/records.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        assert_eq!(row[col("iv_distance")].parse::<f64>().unwrap(), 0.0);
        assert_eq!(row[col("ov_score")].parse::<f64>().unwrap(), 1.0);
        assert_eq!(row[col("dff")].parse::<f64>().unwrap(), 0.0);
        assert_eq!(row[col("pass_all")], "true");
    }
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "[scene]\npairz = 3\n").unwrap();
    let out = mfid(dir.path(), &["--config", "run.toml", "generate", "--out", "data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pairz"));
    assert!(!dir.path().join("data").exists());
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mfid(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(mfid(dir.path(), &["--thresholds", "percentile:95", "generate", "--out", "x"]).status.code(), Some(1));
    assert_eq!(mfid(dir.path(), &["--jobs", "0", "generate", "--out", "x"]).status.code(), Some(1));
    assert!(mfid(dir.path(), &["--help"]).status.success());
}

#[test]
fn missing_files_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = mfid(dir.path(), &["evaluate", "--manifest", "nope/manifest.json", "--out", "eval"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(mfid(dir.path(), &["--config", "missing.toml", "generate", "--out", "x"]).status.code(), Some(2));
    assert_eq!(mfid(dir.path(), &["report", "nothing-here", "--out", "r"]).status.code(), Some(2));
}

#[test]
fn calibrated_variants_need_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
    ok(dir.path(), &["--config", "run.toml", "generate", "--out", "data"]);
    let out = mfid(
        dir.path(),
        &["--config", "run.toml", "evaluate", "--manifest", "data/manifest.json", "--variant", "dff", "--out", "e"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn report_rejects_outputs_of_different_configs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
    ok(dir.path(), &["--config", "run.toml", "generate", "--out", "data"]);
    let eval = |seed: &str, out: &str| {
        ok(
            dir.path(),
            &["--config", "run.toml", "--seed", seed, "evaluate", "--manifest", "data/manifest.json", "--out", out],
        );
    };
    eval("1", "a");
    eval("2", "b");
    let out = ok(dir.path(), &["--config", "run.toml", "report", "a", "--out", "ra"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("Thresholds and pass-rates"));
    assert!(dir.path().join("ra/cdf.csv").exists());
    assert_eq!(mfid(dir.path(), &["report", "a", "b", "--out", "rb"]).status.code(), Some(1));
}

#[test]
fn sut_export_import_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["sut", "export", "--sut", "da", "--out", "da.mfwt"]);
    let out = ok(dir.path(), &["sut", "import", "da.mfwt"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Segmentation"), "{text}");
    let bad = dir.path().join("bad.mfwt");
    let mut bytes = std::fs::read(dir.path().join("da.mfwt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&bad, bytes).unwrap();
    assert_eq!(mfid(dir.path(), &["sut", "import", "bad.mfwt"]).status.code(), Some(2));
}

#[test]
fn calibrate_writes_its_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[scene]\npairs = 4\nsplit_ratio = 0.5\n\n[cf]\nk_cf = 1\nsteps = 4\n\n\
               [calibration]\ntotal_steps = 4\ndff_every = 2\nes_every = 2\nes_batch = 1\ndff_k_cf = 1\ndff_cf_steps = 4\ncheckpoint_every = 2\n";
    std::fs::write(dir.path().join("run.toml"), cfg).unwrap();
    ok(dir.path(), &["--config", "run.toml", "generate", "--out", "data"]);
    ok(dir.path(), &["--config", "run.toml", "calibrate", "--manifest", "data/manifest.json", "--out", "cal"]);
    for f in ["checkpoint.mfck", "train_log.csv", "calibrate.json", "heldout_baseline.csv", "heldout_calibrated.csv"] {
        assert!(dir.path().join("cal").join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(dir.path().join("cal/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    let summary = json(&dir.path().join("cal/calibrate.json"));
    assert_eq!(summary["steps"], 4);
    let first = std::fs::read(dir.path().join("cal/calibrate.json")).unwrap();
    ok(dir.path(), &["--config", "run.toml", "calibrate", "--manifest", "data/manifest.json", "--out", "cal"]);
    assert_eq!(std::fs::read(dir.path().join("cal/calibrate.json")).unwrap(), first);
    ok(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "evaluate",
            "--manifest",
            "data/manifest.json",
            "--variant",
            "dff",
            "--checkpoint",
            "cal/checkpoint.mfck",
            "--out",
            "e",
        ],
    );
    assert_eq!(json(&dir.path().join("e/aggregate.json"))["variant"], "dff");
}
