use std::path::Path;
use std::process::{Command, Output};

fn hails(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hails"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert!(hails(out, &["--seed", "3", "synth-gen", "--branching", "2,2"]).status.success());
    let (edges, panel) = (out.join("edges.csv"), out.join("panel.csv"));
    assert!(edges.exists() && panel.exists());

    let r = hails(out, &["classify", "--edges", s(&edges), "--panel", s(&panel), "--holdout", "6"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(std::fs::read_to_string(out.join("labels.csv")).unwrap().lines().count(), 8);

    let train = [
        "train", "--edges", s(&edges), "--panel", s(&panel), "--holdout", "6", "--hidden", "4", "--window", "12",
        "--horizon", "6", "--max-epochs", "2", "--pretrain-epochs", "1", "--k", "2",
    ];
    let r = hails(out, &train);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("checkpoint.json").exists() && out.join("train.manifest.json").exists());

    let ck = out.join("checkpoint.json");
    let r = hails(out, &["forecast", "--checkpoint", s(&ck), "--panel", s(&panel), "--origin", "114"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let fc = out.join("forecasts.csv");
    assert_eq!(std::fs::read_to_string(&fc).unwrap().lines().count(), 1 + 7 * 6);

    let r = hails(out, &["evaluate", "--forecasts", s(&fc), "--panel", s(&panel), "--edges", s(&edges)]);
    assert!(r.status.success());
    let report = String::from_utf8(r.stdout).unwrap();
    assert!(report.contains("wrmsse") && report.contains("dce"));
    assert!(out.join("report.json").exists());
}

#[test]
fn baseline_forecast_needs_edges() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert!(hails(out, &["synth-gen"]).status.success());
    let panel = out.join("panel.csv");
    let r = hails(out, &["forecast", "--baseline", "six-average", "--panel", s(&panel)]);
    assert_eq!(r.status.code(), Some(2));
    let edges = out.join("edges.csv");
    let r = hails(out, &["forecast", "--baseline", "six-average", "--panel", s(&panel), "--edges", s(&edges), "--horizon", "3"]);
    assert!(r.status.success());
    let text = std::fs::read_to_string(out.join("forecasts.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.contains(",point,")));
}

#[test]
fn invalid_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let edges = out.join("cyclic.csv");
    std::fs::write(&edges, "parent,child\n1,2\n2,1\n").unwrap();
    let panel = out.join("panel.csv");
    std::fs::write(&panel, "node,t,value\n1,0,1\n").unwrap();
    let r = hails(out, &["classify", "--edges", s(&edges), "--panel", s(&panel)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("error"));

    let cfg = out.join("bad.toml");
    std::fs::write(&cfg, "gamma = -1.0\n").unwrap();
    let r = hails(out, &["--config", s(&cfg), "train", "--edges", s(&edges), "--panel", s(&panel)]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn horizon_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert!(hails(out, &["synth-gen", "--branching", "2"]).status.success());
    let (edges, panel) = (out.join("edges.csv"), out.join("panel.csv"));
    let r = hails(out, &[
        "train", "--edges", s(&edges), "--panel", s(&panel), "--hidden", "3", "--window", "12", "--horizon", "2",
        "--max-epochs", "1", "--pretrain-epochs", "0",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let ck = out.join("checkpoint.json");
    let r = hails(out, &["forecast", "--checkpoint", s(&ck), "--panel", s(&panel), "--horizon", "5"]);
    assert_eq!(r.status.code(), Some(2));
}
