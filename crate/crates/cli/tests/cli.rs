use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neuropinn"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = run(out, args);
    assert!(
        o.status.success(),
        "{args:?} exited {:?}: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn simulate_writes_window_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["simulate", "--regime", "hopf", "--seed", "3"]);
    for f in ["trajectory.csv", "observations_clean.csv", "observations.csv"] {
        assert_eq!(data_rows(&dir.path().join(f)), 2001, "{f}");
    }
    let header = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(header.starts_with("t,V,n"));
    let m = read_json(&dir.path().join("manifest.json"));
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    let outputs: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(outputs.contains(&"observations.csv"));
}

#[test]
fn simulate_is_reproducible_and_zero_noise_is_clean() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["simulate", "--regime", "snic", "--seed", "9"]);
    ok(b.path(), &["simulate", "--regime", "snic", "--seed", "9"]);
    let read = |d: &Path| fs::read(d.join("observations.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let c = tempfile::tempdir().unwrap();
    ok(c.path(), &["simulate", "--regime", "snic", "--noise", "relative:0"]);
    assert_eq!(
        fs::read(c.path().join("observations.csv")).unwrap(),
        fs::read(c.path().join("observations_clean.csv")).unwrap()
    );
}

#[test]
fn spectrum_selects_hopf_frequencies() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["simulate", "--regime", "hopf", "--noise", "relative:0"]);
    ok(dir.path(), &["spectrum", "--p", "95"]);
    let sel = read_json(&dir.path().join("selection.json"));
    assert_eq!(sel["m_star"], 5);
    assert_eq!(sel["angular_freqs"].as_array().unwrap().len(), 4);
    assert!(data_rows(&dir.path().join("spectrum.csv")) > 1000);
}

#[test]
fn bifurcate_and_self_diff_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("a");
    ok(&sub, &["bifurcate", "--regime", "hopf", "--range", "60:140", "--orbit-samples", "5"]);
    let events = fs::read_to_string(sub.join("events.csv")).unwrap();
    assert!(events.lines().any(|l| l.starts_with("hopf")), "{events}");
    assert_eq!(data_rows(&sub.join("orbits.csv")), 5);
    let diagram = sub.join("diagram.json");
    let d = diagram.to_str().unwrap();
    ok(dir.path(), &["diff", "--a", d, "--b", d]);
    let dist = read_json(&dir.path().join("distance.json"));
    assert_eq!(dist["total"].as_f64().unwrap(), 0.0);
}

#[test]
fn train_then_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["train", "--regime", "hopf", "--init", "ones", "--stage1-iters", "30", "--stage2-iters", "30"];
    ok(dir.path(), &args);
    let res = read_json(&dir.path().join("result.json"));
    assert_eq!(res["iters"]["stage2"], 30);
    assert_eq!(res["lambda_hat"].as_object().unwrap().len(), 8);
    assert!(res["lambda_hat"]["V1"].as_f64().unwrap() < 0.0);
    for state in ["V", "n"] {
        assert!(dir.path().join(format!("checkpoint_{state}.json")).exists());
    }
    assert_eq!(data_rows(&dir.path().join("reconstruction.csv")), 2001);
    let m = read_json(&dir.path().join("manifest.json"));
    assert!(m["seeds"].as_object().unwrap().contains_key("net_init"));
    assert!(m["phase_seconds"].as_object().unwrap().contains_key("physics"));

    let run_dir = dir.path().to_str().unwrap().to_string();
    let eval_out = dir.path().join("eval");
    ok(&eval_out, &["evaluate", "--run-dir", &run_dir]);
    let ev = read_json(&eval_out.join("evaluation.json"));
    for (k, v) in res["rel_errors"].as_object().unwrap() {
        let a = v.as_f64().unwrap();
        let b = ev["rel_errors"][k].as_f64().unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{k}: {a} vs {b}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["simulate", "--regime", "nonexistent"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"stage2": {"no_such_field": 1}}"#).unwrap();
    let o = run(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(dir.path(), &["bifurcate", "--model", "saddle-node", "--param", "mu", "--range", "-2:-1"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
