use std::path::Path;
use std::process::{Command, Output};

fn intlower(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intlower"))
        .args(args)
        .current_dir(cwd)
        .env("INTLOWER_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(dir: &Path, kind: &str) {
    let o = intlower(&["fixture", "--kind", kind, "--seed", "3", "--out", "model", "--calib-out", "calib"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn stages_compose_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d, "cnn");
    for args in [
        &["prune", "--model", "model", "--mode", "nm", "--n", "2", "--m", "4", "--out", "pruned"][..],
        &["calibrate", "--model", "pruned", "--calib-data", "calib", "--out", "annotated"],
        &["fuse", "--model", "annotated", "--fuse-mode", "channelwise", "--out", "fused"],
        &["verify", "--reference", "annotated", "--model", "fused", "--samples", "16", "--report", "report.json"],
        &["export", "--model", "fused", "--format", "hex", "--word-bits", "8", "--words-per-line", "1", "--out", "bundle"],
        &["run", "--model", "fused", "--input", "calib", "--out", "outputs"],
    ] {
        let o = intlower(args, d);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["int_float_ops"], 0);
    let hex = std::fs::read_to_string(d.join("bundle/weights/conv1.hex")).unwrap();
    assert!(hex.lines().all(|l| l.len() == 2 && l.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_lowercase())));
    // half of every complete group of four is zero
    let zeros = hex.lines().filter(|l| *l == "00").count();
    assert!(zeros * 2 >= hex.lines().count(), "{zeros} zeros");
    assert!(d.join("outputs/tensors.json").exists());
}

#[test]
fn vit_pipeline_with_flags() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), "vit");
    let o = intlower(&["pipeline", "--model", "model", "--out", "run", "--format", "rawbin", "--seed", "2"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["status"], "ok");
    assert_eq!(summary["verify"]["float_ops"], 0);
    assert!(dir.path().join("run/bundle/weights/attn.wq.bin").exists());
}

#[test]
fn missing_model_is_an_io_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = intlower(&["pipeline", "--model", "absent.zip", "--out", "run"], dir.path());
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("absent.zip"));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&intlower(&["pipeline", "--no-such-flag"], dir.path())), 1);
    assert_eq!(code(&intlower(&["transmogrify"], dir.path())), 1);
    assert_eq!(code(&intlower(&["--help"], dir.path())), 0);
}

#[test]
fn bad_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d, "cnn");
    std::fs::write(d.join("typo.json"), r#"{"model": "model", "out": "o", "fuse": {"fracbits": 3}}"#).unwrap();
    std::fs::write(d.join("broken.json"), "{not json").unwrap();
    std::fs::write(d.join("sparse.json"), r#"{"model": "model", "out": "o", "sparsity": {"mode": "nm", "n": 4, "m": 4}}"#).unwrap();
    for file in ["typo.json", "broken.json", "sparse.json"] {
        let o = intlower(&["pipeline", "--config", file], d);
        assert_eq!(code(&o), 2, "{file}: {}", stderr(&o));
    }
    // no output directory anywhere
    assert_eq!(code(&intlower(&["pipeline", "--model", "model"], d)), 2);
}

#[test]
fn lossy_fixed_point_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), "cnn");
    let o = intlower(&["pipeline", "--model", "model", "--out", "run", "--frac-bits", "0"], dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(dir.path().join("run/report.json").exists());
    assert!(!dir.path().join("run/bundle").exists());
}

#[test]
fn config_file_takes_precedence_over_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d, "cnn");
    std::fs::write(d.join("c.json"), r#"{"model": "model", "out": "fromfile", "export": {"format": "binstr"}}"#).unwrap();
    let o = intlower(&["pipeline", "--config", "c.json", "--out", "fromflag", "--format", "hex"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(d.join("fromfile/bundle/weights/conv0.bin.txt").exists());
    assert!(!d.join("fromflag").exists());
}

#[test]
fn logs_are_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_intlower"))
        .args(["fixture", "--out", "m"])
        .current_dir(dir.path())
        .env("INTLOWER_LOG", "info")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let line = stderr(&o).lines().next().expect("one log line").to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["level"], "INFO");
    assert_eq!(v["fields"]["stage"], "save");
}
