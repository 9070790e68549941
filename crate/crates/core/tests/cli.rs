//! End-to-end runs of the `utuning` binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_utuning"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn report(out: &Path, command: &str) -> Value {
    let text = std::fs::read_to_string(out.join(format!("{command}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn equivalence_passes_and_broken_gate_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run(dir.path(), &["verify-equivalence", "--cases", "6"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    let r = report(dir.path(), "verify-equivalence");
    assert_eq!(r["passed"], true);
    assert!(r["command"]
        .as_array()
        .unwrap()
        .iter()
        .any(|a| a == "verify-equivalence"));

    let bad = run(
        dir.path(),
        &[
            "verify-equivalence",
            "--cases",
            "6",
            "--break-gate",
            "--types",
            "prefix",
        ],
    );
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("FAIL"));
    assert_eq!(report(dir.path(), "verify-equivalence")["passed"], false);
}

#[test]
fn count_params_reports_reference_figures() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["count-params"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("76,900") || text.contains("76900"), "{text}");
    assert!(
        text.contains("169,060") || text.contains("169060"),
        "{text}"
    );
}

#[test]
fn pretrain_train_and_export_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = ["--train-size", "64", "--test-size", "32"];
    let o = run(d, &[&["pretrain", "--epochs", "1"][..], &data].concat());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(d.join("backbone.utnt").exists());

    let ckpt = d.join("backbone.utnt");
    let args = [
        &[
            "train",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--epochs",
            "3",
        ][..],
        &data,
    ]
    .concat();
    let o = run(d, &args);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let metrics = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next(),
        Some("epoch,lr,train_loss,train_acc,test_acc")
    );
    assert_eq!(metrics.lines().count(), 5);

    let model = d.join("model.utnt");
    let o = run(
        d,
        &["export-stats", "--checkpoint", model.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let stats = std::fs::read_to_string(d.join("stats.csv")).unwrap();
    assert_eq!(stats.lines().next(), Some("layer,site,statistic,value"));
    assert!(stats.lines().count() > 1);
    assert!(d.join("stats_frozen.csv").exists());
}

#[test]
fn config_errors_exit_with_2_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 1, "tolerance": {"gradient": 1e-4, "grad": 2}}"#,
    )
    .unwrap();
    let o = run(
        dir.path(),
        &["--config", cfg.to_str().unwrap(), "grad-check"],
    );
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("tolerance"), "{err}");

    let o = run(
        dir.path(),
        &["--precision", "f32", "verify-equivalence", "--cases", "1"],
    );
    assert_eq!(o.status.code(), Some(2));

    let o = run(
        dir.path(),
        &["train", "--checkpoint", "/nonexistent/backbone.utnt"],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bare_tuner_config_selects_the_tuners() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tuners.json");
    std::fs::write(
        &cfg,
        r#"{"specs": [{"site": "ffn", "kind": "adapter", "dim": 4, "scaling": "scalar"}]}"#,
    )
    .unwrap();
    let o = run(
        dir.path(),
        &[
            "--config",
            cfg.to_str().unwrap(),
            "train",
            "--pretrain",
            "--pretrain-epochs",
            "1",
            "--epochs",
            "3",
            "--train-size",
            "64",
            "--test-size",
            "16",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}{}",
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).contains("custom"), "{}", stdout(&o));
}
