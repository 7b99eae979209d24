use std::path::Path;
use std::process::{Command, Output};

fn hybridq(args: &[&Path]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy(dir: &Path) -> std::path::PathBuf {
    let fx = dir.join("fx");
    assert!(hybridq(&["fixture".as_ref(), &fx]).status.success());
    fx
}

#[test]
fn missing_model_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_model");
    let out = hybridq(&["inspect".as_ref(), &missing]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("missing_file"), "{err}");
    assert!(err.contains("no_such_model"), "{err}");
}

#[test]
fn missing_inputs_file_fails_trace() {
    let dir = tempfile::tempdir().unwrap();
    let fx = toy(dir.path());
    let inputs = dir.path().join("absent.bin");
    let out = hybridq(&[
        "trace".as_ref(),
        &fx.join("model"),
        "--inputs".as_ref(),
        &inputs,
        "--out".as_ref(),
        &dir.path().join("tr"),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("absent.bin"));
}

#[test]
fn quantize_requires_traces_unless_allowed() {
    let dir = tempfile::tempdir().unwrap();
    let fx = toy(dir.path());
    let model = fx.join("model");
    let q = dir.path().join("q");
    let out = hybridq(&["quantize".as_ref(), &model, "--out".as_ref(), &q]);
    assert!(!out.status.success());

    let out = hybridq(&[
        "quantize".as_ref(),
        &model,
        "--out".as_ref(),
        &q,
        "--allow-uncalibrated".as_ref(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("toy.attn.sm:post_softmax"));
}

#[test]
fn report_file_matches_report_command() {
    let dir = tempfile::tempdir().unwrap();
    let fx = toy(dir.path());
    let (model, tr, q, rep) = (
        fx.join("model"),
        dir.path().join("tr"),
        dir.path().join("q"),
        dir.path().join("report.json"),
    );
    let ok = |o: Output| assert!(o.status.success(), "{}", stderr(&o));
    ok(hybridq(&[
        "trace".as_ref(),
        &model,
        "--inputs".as_ref(),
        &fx.join("calibration.bin"),
        "--out".as_ref(),
        &tr,
    ]));
    ok(hybridq(&[
        "quantize".as_ref(),
        &model,
        "--traces".as_ref(),
        &tr,
        "--out".as_ref(),
        &q,
        "--granularity".as_ref(),
        "per-group".as_ref(),
        "--report".as_ref(),
        &rep,
    ]));
    let printed = hybridq(&["report".as_ref(), &q]);
    assert!(printed.status.success());
    assert_eq!(printed.stdout, std::fs::read(&rep).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&printed.stdout).unwrap();
    assert_eq!(v["config"]["granularity"], "per-group");

    // quantizing an already quantized package is refused
    let again = hybridq(&[
        "quantize".as_ref(),
        &q,
        "--traces".as_ref(),
        &tr,
        "--out".as_ref(),
        &dir.path().join("q2"),
    ]);
    assert!(!again.status.success());
    assert!(stderr(&again).contains("already_quantized"));
}

#[test]
fn bad_bits_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let fx = toy(dir.path());
    let out = hybridq(&[
        "quantize".as_ref(),
        &fx.join("model"),
        "--allow-uncalibrated".as_ref(),
        "--bits".as_ref(),
        "12".as_ref(),
        "--out".as_ref(),
        &dir.path().join("q"),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("invalid_config"), "{}", stderr(&out));
}
