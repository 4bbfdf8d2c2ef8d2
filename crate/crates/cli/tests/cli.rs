use std::path::PathBuf;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mff-seld"))
        .args(args)
        .output()
        .unwrap()
}

fn fixture(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "core", "tests", "fixtures", name]
        .iter()
        .collect();
    p.to_string_lossy().into_owned()
}

#[test]
fn help_succeeds() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Exit codes"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--no.such_key=3", "params"]).status.code(), Some(1));
}

#[test]
fn missing_input_exits_2() {
    let out = run(&["eval", "--pred", "/nonexistent/p.csv", "--ref", "/nonexistent/r.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/p.csv"));
}

#[test]
fn eval_scores_label_files() {
    let (p, r) = (fixture("metrics_pred.csv"), fixture("metrics_ref.csv"));
    let out = run(&["--model.classes=2", "eval", "--pred", &p, "--ref", &r]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(text.contains("62.5"), "{text}");
}

#[test]
fn params_reports_the_full_size() {
    let out = run(&["params"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("26327091"));
}
