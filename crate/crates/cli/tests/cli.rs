use std::path::Path;
use std::process::{Command, Output};

use dynprice_core::features::{combo_design, FeatureSchema};

const SMALL: &[&str] = &["--set", "sim.num_departure_days=20"];

fn dynprice(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynprice"))
        .current_dir(dir)
        .args(args)
        .args(SMALL)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err(out: Output) -> String {
    assert!(!out.status.success(), "expected failure, stdout: {}", String::from_utf8_lossy(&out.stdout));
    String::from_utf8(out.stderr).unwrap()
}

#[test]
fn fixed_seed_reproduces_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(dynprice(d, &["simulate", "--out", "a.csv", "--seed", "5"]));
    ok(dynprice(d, &["simulate", "--out", "b.csv", "--seed", "5"]));
    let a = std::fs::read(d.join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.csv")).unwrap());
    assert_eq!(
        std::fs::read(d.join("a.csv.provenance.json")).unwrap(),
        std::fs::read(d.join("b.csv.provenance.json")).unwrap()
    );

    ok(dynprice(d, &["fit-first-stage", "--data", "a.csv", "--out", "p1.csv"]));
    ok(dynprice(d, &["fit-first-stage", "--data", "a.csv", "--out", "p2.csv"]));
    assert_eq!(std::fs::read(d.join("p1.csv")).unwrap(), std::fs::read(d.join("p2.csv")).unwrap());

    ok(dynprice(d, &["simulate", "--out", "c.csv", "--seed", "6"]));
    assert_ne!(a, std::fs::read(d.join("c.csv")).unwrap());
}

#[test]
fn provenance_records_seed_and_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    ok(dynprice(dir.path(), &["simulate", "--out", "a.csv", "--seed", "9"]));
    let text = std::fs::read_to_string(dir.path().join("a.csv.provenance.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["seed"], 9);
    assert_eq!(v["command"], "simulate");
    assert_eq!(v["config_sha256"].as_str().unwrap().len(), 64);
    assert!(v["config"].as_str().unwrap().contains("rng_seed = 9"));
}

#[test]
fn zero_capacity_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let msg = err(dynprice(dir.path(), &["simulate", "--out", "a.csv", "--set", "sim.capacity=0"]));
    assert!(msg.starts_with("config error"), "{msg}");
    assert!(!dir.path().join("a.csv").exists());
}

#[test]
fn ten_folds_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(dynprice(d, &["simulate", "--out", "a.csv"]));
    ok(dynprice(d, &["fit-first-stage", "--data", "a.csv", "--out", "p.csv", "--folds", "10"]));
    let text = std::fs::read_to_string(d.join("p.csv.provenance.json")).unwrap();
    assert!(text.contains("n_folds = 10"));
}

#[test]
fn missing_predictions_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(dynprice(d, &["simulate", "--out", "a.csv"]));
    let msg = err(dynprice(
        d,
        &["fit-two-stage", "--data", "a.csv", "--predictions", "nope.csv", "--out", "post.json"],
    ));
    assert!(msg.contains("nope.csv"), "{msg}");
    assert!(!d.join("post.json").exists());
}

#[test]
fn unknown_policy_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let msg = err(dynprice(dir.path(), &["price", "--truth-slope", "--policy", "cheapest"]));
    assert!(msg.starts_with("config error"), "{msg}");
}

#[test]
fn perfect_estimate_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(dynprice(d, &["simulate", "--out", "a.csv"]));
    ok(dynprice(d, &["fit-first-stage", "--data", "a.csv", "--out", "p.csv"]));
    ok(dynprice(
        d,
        &["fit-two-stage", "--data", "a.csv", "--predictions", "p.csv", "--out", "post.json"],
    ));

    // replace the fitted slope coefficients with a known additive truth
    let schema = FeatureSchema::default();
    let mut post: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("post.json")).unwrap()).unwrap();
    let dim = post["dim_theta"].as_u64().unwrap() as usize;
    let theta: Vec<f64> = (0..dim).map(|k| if k == 0 { -0.006 } else { 0.0001 * k as f64 }).collect();
    for (k, t) in theta.iter().enumerate() {
        post["mu"][k] = (*t).into();
    }
    std::fs::write(d.join("perfect.json"), serde_json::to_string(&post).unwrap()).unwrap();

    let mut truth = String::from("pos,tf,alpha\n");
    for pos in 0..schema.n_pos as u8 {
        for tf in 0..schema.n_tf as u8 {
            let w = combo_design(pos, tf, &schema).unwrap().values;
            let b: f64 = w.iter().zip(&theta).map(|(a, b)| a * b).sum();
            truth.push_str(&format!("{pos},{tf},{}\n", -1.0 / b));
        }
    }
    std::fs::write(d.join("truth.csv"), truth).unwrap();

    let out = ok(dynprice(
        d,
        &[
            "evaluate", "--data", "a.csv", "--truth", "truth.csv", "--method", "perfect=perfect.json", "--out-dir", "rep",
        ],
    ));
    let line = out.lines().find(|l| l.starts_with("perfect:")).unwrap();
    let nums: Vec<f64> = line
        .split(|c: char| !(c.is_ascii_digit() || c == '.'))
        .filter_map(|s| s.parse().ok())
        .collect();
    assert_eq!(nums.len(), 2, "{line}");
    assert!(nums.iter().all(|v| *v < 1e-9), "{line}");
    assert!(d.join("rep/table.csv").exists());
}

#[test]
fn greedy_price_for_zero_cost_is_alpha() {
    let dir = tempfile::tempdir().unwrap();
    // theta = 1/150 at (0, 0) by default
    let out = ok(dynprice(
        dir.path(),
        &["price", "--truth-slope", "--policy", "greedy", "--pos", "0", "--tf", "0", "--cost", "0", "--lb", "0", "--ub", "1000"],
    ));
    let p: f64 = out.trim().parse().unwrap();
    assert!((p - 150.0).abs() <= 1e-6, "{p}");
}

#[test]
fn ucb_without_uncertainty_is_greedy() {
    let dir = tempfile::tempdir().unwrap();
    let run = |policy: &str, q: &str| -> f64 {
        ok(dynprice(
            dir.path(),
            &[
                "price", "--truth-slope", "--policy", policy, "--quantile", q, "--pos", "1", "--tf", "4", "--cost", "30",
                "--lb", "40", "--ub", "900",
            ],
        ))
        .trim()
        .parse()
        .unwrap()
    };
    let g = run("greedy", "0.5");
    assert!((g - 240.0).abs() <= 1e-9, "{g}");
    for (policy, q) in [("ucb-tn", "0.5"), ("ucb-tn", "0.9"), ("ucb-taylor", "0.9")] {
        let u = run(policy, q);
        assert!((g - u).abs() <= 1e-9, "greedy {g} vs {policy} at {q}: {u}");
    }
}

#[test]
fn reversed_bounds_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let msg = err(dynprice(dir.path(), &["price", "--truth-slope", "--lb", "400", "--ub", "100"]));
    assert!(msg.starts_with("config error"), "{msg}");
}
