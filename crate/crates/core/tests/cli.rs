//! The `lsos` binary: output shape and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_lsos");

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name).to_string_lossy().into_owned()
}

fn lsos(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("LSOS_TOL").env_remove("LSOS_LOG").output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn bound_prints_interval() {
    let out = lsos(&["bound", &fixture("war.lsos"), "--degree", "4", "--min", "--expr", "e(War(Antony,g1))"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["status"], "feasible");
    assert!((v["lo"].as_f64().unwrap() - 0.75).abs() < 1e-4);
    assert!(v["hi"].is_null());
}

#[test]
fn refute_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let cert = dir.path().join("war.cert.json");
    let cert = cert.to_str().unwrap();
    let kb = fixture("war.lsos");
    let q = "e(War(Antony,g1)) <= 0.74";
    let out = lsos(&["refute", &kb, "--degree", "4", "--expr", q, "-o", cert]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["certificate"], cert);

    let out = lsos(&["verify", &kb, "--cert", cert]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(json(&out)["pass"], true);

    // a rescaled certificate no longer sums to -1
    let mut c: Value = serde_json::from_str(&std::fs::read_to_string(cert).unwrap()).unwrap();
    c["scale"] = Value::from(c["scale"].as_f64().unwrap() * 1.5);
    std::fs::write(cert, c.to_string()).unwrap();
    let out = lsos(&["verify", &kb, "--cert", cert]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["pass"], false);
}

#[test]
fn check_exit_codes() {
    assert_eq!(lsos(&["check", &fixture("heart_rate.lsos")]).status.code(), Some(0));
    let out = lsos(&["check", &fixture("chebyshev.lsos")]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["status"], "infeasible");
    // nothing converges in one iteration
    let out = lsos(&["check", &fixture("war.lsos"), "--degree", "4", "--max-iters", "1"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(json(&out)["status"], "unknown");
}

#[test]
fn input_errors() {
    let out = lsos(&["check", "/nonexistent/kb.lsos"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.lsos");
    std::fs::write(&bad, "relation P/1; forall x : e(Q(x)) >= 0;").unwrap();
    let out = lsos(&["check", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains('Q'));

    let out = lsos(&["check", &fixture("war.lsos"), "--degree", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(lsos(&["bound", &fixture("war.lsos"), "--k", "2", "--dc", "--expr", "e(War(Antony,Cleopatra))"]).status.code(), Some(2));
}

#[test]
fn ground_lists_theory() {
    let out = lsos(&["ground", &fixture("qp.lsos"), "--k", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["bounds"].as_array().unwrap().len(), 13);
    assert_eq!(v["names"], serde_json::json!(["james", "g1", "g2"]));
}

#[test]
fn compare_universes_rows() {
    let out = lsos(&["compare-universes", &fixture("heart_rate.lsos"), "--ks", "1,2", "--min", "--expr", "e(HR(g1))", "--parallel"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["rank"], 1);
    let rows = v["results"].as_array().unwrap();
    assert_eq!(rows.iter().map(|r| r["k"].as_u64().unwrap()).collect::<Vec<_>>(), [1, 2]);
    assert!(rows.iter().all(|r| (r["lo"].as_f64().unwrap() - 68.0).abs() < 1e-4));
}
