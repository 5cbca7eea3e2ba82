use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use copsamp::io::read_scores_csv;
use copsamp::model::{class_probabilities, Coefficients};
use copsamp::uncertainty::{EnsembleMode, ProbeEnsemble};
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn copsamp(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_copsamp"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn fit_fixture_converges() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture("binary6.csv");
    let o = copsamp(dir.path(), &["fit", "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc = json(&dir.path().join("fit.json"));
    assert_eq!(doc["fit"]["converged"], Value::Bool(true));
    assert_eq!(doc["manifest"]["command"], "fit");
    assert!(doc["manifest"].get("duration_secs").is_none());
    assert!(json(&dir.path().join("manifest.json"))["duration_secs"].is_number());
}

#[test]
fn unit_weight_column_matches_unweighted_fit() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixture("binary6.csv")).unwrap();
    let mut weighted = String::new();
    for (i, line) in text.lines().enumerate() {
        weighted.push_str(line);
        weighted.push_str(if i == 0 { ",w\n" } else { ",1\n" });
    }
    let path = dir.path().join("w.csv");
    fs::write(&path, weighted).unwrap();
    let plain = dir.path().join("plain");
    let with_w = dir.path().join("weighted");
    assert_eq!(copsamp(&plain, &["fit", "--data", fixture("binary6.csv").to_str().unwrap()]).status.code(), Some(0));
    let o = copsamp(&with_w, &["fit", "--data", path.to_str().unwrap(), "--weights-col", "w"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(json(&plain.join("fit.json"))["fit"]["beta"], json(&with_w.join("fit.json"))["fit"]["beta"]);
}

#[test]
fn malformed_row_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(&path, "x0,x1,y\n1,0.5,1\n1,abc,0\n").unwrap();
    let o = copsamp(dir.path(), &["fit", "--data", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn strict_fit_fails_on_non_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture("binary6.csv");
    let args = ["fit", "--data", data.to_str().unwrap(), "--max-iters", "1"];
    assert_eq!(copsamp(dir.path(), &args).status.code(), Some(0));
    let doc = json(&dir.path().join("fit.json"));
    assert_eq!(doc["fit"]["converged"], Value::Bool(false));
    let mut strict = args.to_vec();
    strict.push("--strict");
    assert_eq!(copsamp(dir.path(), &strict).status.code(), Some(1));
}

fn write_ensemble(path: &Path, members: Vec<Coefficients>) {
    let e = ProbeEnsemble::from_members(members, 50, EnsembleMode::IndependentSplits).unwrap();
    fs::write(path, serde_json::to_string(&e).unwrap()).unwrap();
}

#[test]
fn identical_members_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let ens = dir.path().join("ens.json");
    let b = Coefficients::from_rows(&[[0.3, -1.0]]).unwrap();
    write_ensemble(&ens, vec![b.clone(), b.clone(), b]);
    let data = fixture("binary6.csv");
    let o = copsamp(dir.path(), &["score", "--data", data.to_str().unwrap(), "--ensemble", ens.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let u = read_scores_csv(&dir.path().join("scores.csv")).unwrap();
    assert_eq!(u, vec![0.0; 6]);
}

#[test]
fn coreset_and_active_scores_satisfy_label_averaging() {
    let dir = tempfile::tempdir().unwrap();
    let ens = dir.path().join("ens.json");
    let members = vec![
        Coefficients::from_rows(&[[0.3, -1.0]]).unwrap(),
        Coefficients::from_rows(&[[0.5, -0.2]]).unwrap(),
        Coefficients::from_rows(&[[-0.1, -0.7]]).unwrap(),
    ];
    let mean = Coefficients::mean(&members).unwrap();
    write_ensemble(&ens, members);
    // The same rows labeled 0 and then 1.
    let xs = [[1.0, 0.5], [1.0, -1.0], [1.0, 1.5], [1.0, -0.3]];
    let mut by_label = Vec::new();
    for y in 0..2 {
        let path = dir.path().join(format!("y{y}.csv"));
        let mut text = String::from("x0,x1,y\n");
        for x in &xs {
            text.push_str(&format!("{},{},{y}\n", x[0], x[1]));
        }
        fs::write(&path, text).unwrap();
        let out = dir.path().join(format!("c{y}"));
        let o = copsamp(&out, &["score", "--data", path.to_str().unwrap(), "--ensemble", ens.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        by_label.push(read_scores_csv(&out.join("scores.csv")).unwrap());
    }
    let out = dir.path().join("a");
    let data = dir.path().join("y1.csv");
    let o = copsamp(
        &out,
        &["score", "--data", data.to_str().unwrap(), "--ensemble", ens.to_str().unwrap(), "--kind", "active"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let active = read_scores_csv(&out.join("scores.csv")).unwrap();
    for (i, x) in xs.iter().enumerate() {
        let p = class_probabilities(&mean, x).unwrap();
        let avg = p.as_slice()[0] * by_label[0][i] + p.as_slice()[1] * by_label[1][i];
        assert!((avg - active[i]).abs() <= 1e-12 * (1.0 + active[i]), "{avg} {}", active[i]);
    }
}

#[test]
fn score_dimension_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let ens = dir.path().join("ens.json");
    let b = Coefficients::from_rows(&[[0.3, -1.0, 2.0]]).unwrap();
    write_ensemble(&ens, vec![b.clone(), b]);
    let data = fixture("binary6.csv");
    let o = copsamp(dir.path(), &["score", "--data", data.to_str().unwrap(), "--ensemble", ens.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn sample_clip_plan() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("u.csv");
    fs::write(&scores, "index,u\n0,1\n1,2\n2,10\n").unwrap();
    let o = copsamp(
        dir.path(),
        &[
            "--seed",
            "3",
            "sample",
            "--scores",
            scores.to_str().unwrap(),
            "--r",
            "40",
            "--alpha-mult",
            "3",
            "--transform",
            "identity",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let plan = json(&dir.path().join("plan.json"));
    let pi: Vec<f64> = plan["plan"]["pi"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    for (a, b) in pi.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(plan["manifest"]["config"]["beta_floor"], 0.1);
    let sub = fs::read_to_string(dir.path().join("subsample.csv")).unwrap();
    assert!(sub.starts_with("draw_index,source_row,weight\n"));
    assert_eq!(sub.lines().count(), 41);
}

#[test]
fn sample_rejects_zero_r() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("u.csv");
    fs::write(&scores, "index,u\n0,1\n").unwrap();
    let o = copsamp(dir.path(), &["sample", "--scores", scores.to_str().unwrap(), "--r", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_is_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    for dir in [&a, &b] {
        let o = copsamp(dir, &["--seed", "7", "simulate", "--trials", "1"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for name in ["report.json", "trials.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let csv = fs::read_to_string(a.join("trials.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "method,case,param_error_d1,param_error_d2,param_error_l2,regret,seed"
    );
    assert_eq!(csv.lines().count(), 1 + 3 * 7);
}

#[test]
fn simulate_missing_field_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut config: Value = serde_json::from_str(copsamp::simulation::PAPER_SIM_JSON).unwrap();
    config.as_object_mut().unwrap().remove("beta_star");
    let path = dir.path().join("cfg.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let o = copsamp(dir.path(), &["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("beta_star") && err.contains("cfg.json:"), "{err}");
}

#[test]
fn generate_train_and_exact_score() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.json");
    let mut doc: Value = serde_json::from_str(copsamp::simulation::PAPER_SIM_JSON).unwrap();
    for (atom, n) in doc["atoms"].as_array_mut().unwrap().iter_mut().zip([100, 2000, 2000]) {
        atom["count"] = n.into();
    }
    fs::write(&config, doc.to_string()).unwrap();
    let data_dir = dir.path().join("data");
    let o = copsamp(&data_dir, &["generate", "--config", config.to_str().unwrap(), "--case", "zeta_minus_1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let data = data_dir.join("data.csv");
    let ens_dir = dir.path().join("ens");
    let o = copsamp(&ens_dir, &["train-ensemble", "--data", data.to_str().unwrap(), "--members", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ens = ens_dir.join("ensemble.json");
    let score_dir = dir.path().join("score");
    let o = copsamp(
        &score_dir,
        &["score", "--data", data.to_str().unwrap(), "--ensemble", ens.to_str().unwrap(), "--estimator", "exact"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let u = read_scores_csv(&score_dir.join("scores.csv")).unwrap();
    assert_eq!(u.len(), 4100);
    assert!(u.iter().all(|v| *v >= 0.0) && u.iter().any(|v| *v > 0.0));
}

#[test]
fn selfcheck_quick_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = copsamp(dir.path(), &["selfcheck", "--quick"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("phi_psi_label_average") && !stdout.contains("ensemble_exact"));
}
