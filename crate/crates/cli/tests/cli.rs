use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lulc(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lulc"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Small, fast synthetic setup in its own temp dir.
fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{
  "workdir": "work",
  "seed": 7,
  "synth": {{ "width": 256, "height": 256 }},
  "chip_policy": {{ "max_missing_frac": 0.5, "max_other_frac": 0.9, "patch_size": 128 }},
  "eval_stride": 64,
  "train": {{ "regime": "cps", "epochs": 3, "lr": 0.05 }}{extra}
}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

fn manifest_info(dir: &Path, stage: &str) -> serde_json::Value {
    let text = fs::read_to_string(dir.join("work").join(stage).join("manifest.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn eval_without_predictions_is_a_precondition_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = lulc(&cfg, &["eval"]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
}

#[test]
fn missing_or_invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = lulc(&dir.path().join("nope.json"), &["synth"]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = small_config(dir.path(), r#", "threshold": 0.0"#);
    assert_eq!(lulc(&cfg, &["synth"]).status.code(), Some(2));
}

#[test]
fn full_chain_then_rerun_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = lulc(&cfg, &["run"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for stage in [
        "synth",
        "ac",
        "rasterize",
        "chip",
        "train",
        "predict",
        "merge",
        "eval",
        "change",
    ] {
        assert!(
            dir.path()
                .join("work")
                .join(stage)
                .join("manifest.json")
                .exists(),
            "{stage}"
        );
    }
    let ckpt = dir.path().join("work/train/model.ckpt");
    let before = fs::metadata(&ckpt).unwrap().modified().unwrap();
    let m1 = manifest_info(dir.path(), "train");

    // Nothing changed: every stage is skipped and nothing is rewritten.
    let out = Command::new(env!("CARGO_BIN_EXE_lulc"))
        .args(["run", "--config"])
        .arg(&cfg)
        .env("RUST_LOG", "info")
        .output()
        .unwrap();
    assert!(out.status.success());
    let log = String::from_utf8_lossy(&out.stderr);
    assert_eq!(log.matches("up to date").count(), 9, "{log}");
    assert_eq!(fs::metadata(&ckpt).unwrap().modified().unwrap(), before);

    // A changed parameter re-runs that stage and leaves upstream alone.
    let out = lulc(&cfg, &["train", "--set", "train.epochs=2"]);
    assert!(out.status.success());
    let m2 = manifest_info(dir.path(), "train");
    assert_ne!(m1["outputs"], m2["outputs"]);
    assert_eq!(m1["inputs"], m2["inputs"]);

    // --force re-runs even when current.
    let out = lulc(&cfg, &["chip", "--force"]);
    assert!(out.status.success());
}

#[test]
fn change_against_itself_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    assert!(lulc(&cfg, &["run"]).status.success());
    let csv = fs::read_to_string(dir.path().join("work/change/change.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[1], f[2], "{row}");
        assert_eq!(f[3], "0.0000");
        assert!(f[4] == "0.0000" || f[4] == "N/A", "{row}");
    }
}

#[test]
fn change_against_a_baseline_reports_differences() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base");
    fs::create_dir_all(&base).unwrap();
    let cfg = small_config(&base, "");
    assert!(lulc(&cfg, &["run"]).status.success());
    let merged = base.join("work/merge/merged.json");

    let later = dir.path().join("later");
    fs::create_dir_all(&later).unwrap();
    let extra = format!(r#", "paths": {{ "baseline": "{}" }}"#, merged.display());
    let cfg2 = small_config(&later, &extra);
    let out = lulc(&cfg2, &["run", "--seed", "8"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(later.join("work/change/change.csv")).unwrap();
    assert!(
        csv.lines()
            .skip(1)
            .any(|r| r.split(',').nth(3) != Some("0.0000")),
        "{csv}"
    );
}

#[test]
fn divergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = lulc(&cfg, &["run", "--set", "train.lr=1e308"]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn seed_flag_changes_the_scene() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    assert!(lulc(&cfg, &["synth"]).status.success());
    let a = fs::read(dir.path().join("work/synth/vectors_full.geojson")).unwrap();
    assert!(lulc(&cfg, &["synth", "--seed", "99"]).status.success());
    let b = fs::read(dir.path().join("work/synth/vectors_full.geojson")).unwrap();
    assert_ne!(a, b);
}
