use std::path::Path;
use std::process::{Command, Output};

use dimer_cli::manifest::{RunManifest, RunStatus, MANIFEST_NAME};

fn dimer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dimer")).args(args).output().expect("spawn dimer")
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_NAME)).unwrap()).unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("cfg.json");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL: &str = r#"{"command":"trajectory","model":{"f":1.5},"integrator":{"t_final":4,"n_max":12}}"#;

#[test]
fn rerun_from_manifest_reproduces_checksums() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(dimer(&["trajectory", "--config", &cfg, "--seed", "17", "--out", a.to_str().unwrap()]).status.success());
    let first = manifest(&a);
    assert_eq!(first.status, RunStatus::Ok);
    assert!(first.outputs.contains_key("samples.csv"));

    let from = a.join(MANIFEST_NAME);
    let out = dimer(&["trajectory", "--config", from.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(manifest(&b).outputs, first.outputs);
}

#[test]
fn zero_drive_has_no_jumps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"command":"trajectory","model":{"f":0.0},"integrator":{"t_final":3,"n_max":4}}"#);
    let out = tmp.path().join("run");
    assert!(dimer(&["trajectory", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    assert_eq!(std::fs::read_to_string(out.join("jumps.ndjson")).unwrap(), "");
    let samples = std::fs::read_to_string(out.join("samples.csv")).unwrap();
    for line in samples.lines().skip(1) {
        let n1: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(n1, 0.0);
    }
}

#[test]
fn ensemble_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"command":"ensemble","model":{"f":2.0},"integrator":{"t_final":3,"n_max":12},"ensemble":{"n_traj":3}}"#,
    );
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let out = dimer(&["ensemble", "--config", &cfg, "--seed", "5", "--out", dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        manifest(&dir).outputs
    };
    let a = run("a");
    assert_eq!(a.keys().filter(|k| k.starts_with("samples_")).count(), 3);
    assert_eq!(a, run("b"));
}

#[test]
fn misspelled_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"command":"trajectory","integrator":{"t_finl":4}}"#);
    let out = dimer(&["trajectory", "--config", &cfg, "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("t_finl"), "{err}");
}

#[test]
fn command_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = dimer(&["sweep", "--config", &cfg, "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn heavy_runs_need_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"command":"stats","stats":{"f_values":[6.0],"mu_values":[20.0]}}"#);
    let dir = tmp.path().join("h");
    let out = dimer(&["stats", "--config", &cfg, "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--heavy") && err.contains("core-hours"), "{err}");
    let m = manifest(&dir);
    assert_eq!(m.status, RunStatus::Failed);
    assert!(m.outputs.is_empty());
}

#[test]
fn sweep_preset_writes_bifurcations() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("s");
    let out = dimer(&["sweep", "--preset", "fig1", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.join("bifurcations.csv")).unwrap();
    let kinds: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(kinds, ["pitchfork", "hopf", "hopf", "saddle-node", "saddle-node", "pitchfork"]);
}
