use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn medtmle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medtmle"))
        .args(args)
        .env_remove("MEDT_SEED")
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// stderr must be a single JSON object with an error kind.
fn error_kind(out: &Output) -> String {
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert!(v["message"].is_string());
    v["error"].as_str().unwrap().to_string()
}

fn simulate(dir: &Path, n: &str) {
    let out = medtmle(&["simulate", "--n", n, "--seed", "5", "--out", path(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn scenario(dir: &Path, reps: usize) -> std::path::PathBuf {
    let p = dir.join("scenario.json");
    let spec = serde_json::json!({
        "name": "tiny",
        "n": 200,
        "replicates": reps,
        "seed": 11,
        "estimators": ["exact-initial", "exact-tmle"],
    });
    std::fs::write(&p, spec.to_string()).unwrap();
    p
}

#[test]
fn estimate_reports_targets_contrasts_and_intervals() {
    let dir = TempDir::new().unwrap();
    simulate(dir.path(), "400");
    let d = dir.path();
    let out_dir = d.join("est");
    let out = medtmle(&[
        "estimate",
        "--schema",
        path(&d.join("schema.json")),
        "--data",
        path(&d.join("data.csv")),
        "--targets",
        path(&d.join("targets.json")),
        "--seed",
        "1",
        "--out",
        path(&out_dir),
    ]);
    assert!(matches!(out.status.code(), Some(0) | Some(2)));
    let est: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("estimates.json")).unwrap()).unwrap();
    let rows = est["rows"].as_array().unwrap();
    // 6 targets and NIE/NDE/TE for each of the two outcomes.
    assert_eq!(rows.len(), 12);
    for r in rows {
        let (lo, hi) = (r["ci_lo"].as_f64().unwrap(), r["ci_hi"].as_f64().unwrap());
        let (slo, shi) = (r["ci_lo_simul"].as_f64().unwrap(), r["ci_hi_simul"].as_f64().unwrap());
        assert!(slo <= lo && lo <= hi && hi <= shi);
    }
    let ci = std::fs::read_to_string(out_dir.join("ci.csv")).unwrap();
    assert_eq!(ci.lines().count(), 13);
    assert!(out_dir.join("trace.csv").exists() && out_dir.join("likelihood.json").exists());
}

#[test]
fn non_convergence_exits_with_two_and_still_writes_outputs() {
    let dir = TempDir::new().unwrap();
    simulate(dir.path(), "300");
    let d = dir.path();
    let out_dir = d.join("est");
    let out = medtmle(&[
        "estimate",
        "--schema",
        path(&d.join("schema.json")),
        "--data",
        path(&d.join("data.csv")),
        "--targets",
        path(&d.join("targets.json")),
        "--stop-tol",
        "1e-300",
        "--max-iter",
        "2",
        "--seed",
        "1",
        "--out",
        path(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out_dir.join("estimates.json").exists());
}

#[test]
fn bad_inputs_give_json_errors() {
    let dir = TempDir::new().unwrap();
    simulate(dir.path(), "100");
    let d = dir.path();
    let (schema, targets, out) = (d.join("schema.json"), d.join("targets.json"), d.join("x"));
    let run = |data: &Path, extra: &[&str]| {
        let mut args = vec![
            "estimate",
            "--schema",
            path(&schema),
            "--data",
            path(data),
            "--targets",
            path(&targets),
            "--out",
            path(&out),
        ];
        args.extend_from_slice(extra);
        medtmle(&args)
    };

    let header = std::fs::read_to_string(d.join("data.csv")).unwrap();
    let header = header.lines().next().unwrap();
    let empty = d.join("empty.csv");
    std::fs::write(&empty, format!("{header}\n")).unwrap();
    let out = run(&empty, &["--seed", "1"]);
    assert_eq!(error_kind(&out), "data");
    assert!(String::from_utf8_lossy(&out.stderr).contains("no rows"));

    let wrong = d.join("wrong.csv");
    std::fs::write(&wrong, "a,b\n0,1\n").unwrap();
    assert_eq!(error_kind(&run(&wrong, &["--seed", "1"])), "data");

    let good = d.join("data.csv");
    assert_eq!(error_kind(&run(&good, &["--seed", "1", "--mode", "haleic", "--hal-N", "0"])), "config");
    assert_eq!(error_kind(&run(&good, &[])), "usage");
    assert_eq!(error_kind(&run(&d.join("missing.csv"), &["--seed", "1"])), "io");
    assert_eq!(error_kind(&medtmle(&["estimate", "--bogus"])), "usage");
}

#[test]
fn single_replicate_has_no_sd() {
    let dir = TempDir::new().unwrap();
    let sc = scenario(dir.path(), 1);
    let out_dir = dir.path().join("out");
    let out = medtmle(&["replicate-study", "--scenario", path(&sc), "--out", path(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("tiny.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let sd = header.iter().position(|h| *h == "SD").unwrap();
    for line in csv.lines().skip(1) {
        // Labels are quoted and contain one comma.
        let cols: Vec<&str> = line.splitn(2, "\",").nth(1).unwrap().split(',').collect();
        assert_eq!(cols[sd - 1], "NA", "{line}");
    }
}

#[test]
fn studies_do_not_depend_on_jobs_and_report_combines_them() {
    let dir = TempDir::new().unwrap();
    let sc = scenario(dir.path(), 4);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, jobs) in [(&a, "1"), (&b, "3")] {
        let o = medtmle(&["replicate-study", "--scenario", path(&sc), "--jobs", jobs, "--out", path(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["tiny.csv", "tiny_replicates.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rep = dir.path().join("rep");
    let o = medtmle(&["report", "--inputs", path(&a), "--out", path(&rep)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cmp = std::fs::read_to_string(rep.join("comparison.csv")).unwrap();
    // 6 targets x 2 estimators.
    assert_eq!(cmp.lines().count(), 1 + 12);
    assert!(rep.join("lambda_grid.csv").exists() && rep.join("report.md").exists());
}

#[test]
fn seed_comes_from_the_environment_when_not_given() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = Command::new(env!("CARGO_BIN_EXE_medtmle"))
        .args(["simulate", "--n", "60", "--out", path(&a)])
        .env("MEDT_SEED", "9")
        .output()
        .unwrap();
    assert!(o.status.success());
    let o = medtmle(&["simulate", "--n", "60", "--seed", "9", "--out", path(&b)]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(a.join("data.csv")).unwrap(), std::fs::read(b.join("data.csv")).unwrap());
    assert_eq!(error_kind(&medtmle(&["simulate", "--out", path(&a)])), "usage");
}
