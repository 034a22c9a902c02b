//! End-to-end tests of the command-line interface: exit codes, artifact
//! layout, determinism, and the reference tables.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scoreflow"))
}

fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("scoreflow_cli_{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY_RWPO: &str = r#"{
  "problem": "rwpo",
  "dim": 1,
  "hidden": 4,
  "n_t": 5,
  "n_z": 8,
  "iters": 2,
  "algorithm": "standard",
  "runs": 1,
  "seed": 3,
  "resample": false,
  "eval": { "n_eval": 64 }
}"#;

#[test]
fn rejects_unknown_config_keys_before_any_compute() {
    let dir = temp_dir("unknown_key");
    let config = write_config(
        &dir,
        r#"{"problem":"rwpo","dim":1,"n_t":5,"n_z":8,"iters":2,
            "algorithm":"standard","runs":1,"seed":3,"itters":9}"#,
    );
    let out = bin().arg("run").arg(&config).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("unknown field"), "stderr: {}", stderr_of(&out));
}

#[test]
fn rejects_unknown_problem_names() {
    let dir = temp_dir("unknown_problem");
    let config = write_config(
        &dir,
        r#"{"problem":"rwpoo","dim":1,"n_t":5,"n_z":8,"iters":2,
            "algorithm":"standard","runs":1,"seed":3}"#,
    );
    let out = bin().arg("run").arg(&config).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("unknown problem"), "stderr: {}", stderr_of(&out));
}

#[test]
fn tiny_run_emits_the_artifact_set() {
    let dir = temp_dir("artifacts");
    let config = write_config(&dir, TINY_RWPO);
    let out_dir = dir.join("out");
    let out = bin().arg("run").arg(&config).arg("--output").arg(&out_dir).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));

    for file in [
        "errors.json",
        "manifest.json",
        "run0/cost_curve.csv",
        "run0/checkpoint.json",
        "run0/trajectories.csv",
        "run0/terminal_scatter.csv",
        "run0/velocity_slice.csv",
        "run0/em_trajectories.csv",
    ] {
        assert!(out_dir.join(file).is_file(), "missing {file}");
    }

    let curve = std::fs::read_to_string(out_dir.join("run0/cost_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3, "header plus one line per iteration");
    assert_eq!(curve.lines().next().unwrap(), "iter,loss_cost,loss_hjb,loss_total");

    let errors: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("errors.json")).unwrap())
            .unwrap();
    assert_eq!(errors["problem"], "rwpo");
    let aggregate = &errors["aggregate"];
    for key in ["err_rho", "err_f", "err_s", "cost_gap"] {
        assert!(
            aggregate[key]["mean"].is_f64(),
            "errors.json lacks a numeric {key}: {aggregate}"
        );
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert!(manifest["config_digest"].as_str().unwrap().len() == 16);
    assert!(manifest["version"].is_string());
    assert!(manifest["wall_time_seconds"].is_f64());
}

#[test]
fn zero_iterations_writes_a_header_only_cost_curve() {
    let dir = temp_dir("zero_iters");
    let config = write_config(&dir, &TINY_RWPO.replace(r#""iters": 2"#, r#""iters": 0"#));
    let out_dir = dir.join("out");
    let out = bin().arg("run").arg(&config).arg("--output").arg(&out_dir).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let curve = std::fs::read_to_string(out_dir.join("run0/cost_curve.csv")).unwrap();
    assert_eq!(curve, "iter,loss_cost,loss_hjb,loss_total\n");
}

#[test]
fn identical_configs_reproduce_artifacts_byte_for_byte() {
    let dir = temp_dir("determinism");
    let config = write_config(&dir, TINY_RWPO);
    let (a, b) = (dir.join("a"), dir.join("b"));
    for out_dir in [&a, &b] {
        let out = bin().arg("run").arg(&config).arg("--output").arg(out_dir).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    }
    for file in ["run0/cost_curve.csv", "errors.json", "run0/checkpoint.json"] {
        let left = std::fs::read(a.join(file)).unwrap();
        let right = std::fs::read(b.join(file)).unwrap();
        assert_eq!(left, right, "{file} differs between identical runs");
    }
}

#[test]
fn reference_rejects_unsupported_dimensions() {
    let dir = temp_dir("ref_dim3");
    let out = bin()
        .args(["reference", "double_well", "--dim", "3"])
        .arg("--output")
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("dimensions"), "stderr: {}", stderr_of(&out));
}

#[test]
fn reference_tabulates_the_default_grid_and_reruns_identically() {
    let dir = temp_dir("ref_1d");
    let (a, b) = (dir.join("a"), dir.join("b"));
    for out_dir in [&a, &b] {
        let out = bin()
            .args(["reference", "double_well", "--dim", "1"])
            .arg("--output")
            .arg(out_dir)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    }
    let rho = std::fs::read_to_string(a.join("rho_T.csv")).unwrap();
    assert_eq!(rho.lines().count(), 802, "header plus 801 grid rows");
    assert_eq!(rho.lines().next().unwrap(), "x_1,rho,s_1,f_1");
    assert!(a.join("f0.csv").is_file());

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("reference_manifest.json")).unwrap())
            .unwrap();
    let mass = manifest["grid_mass"].as_f64().unwrap();
    assert!((mass - 1.0).abs() < 1e-3, "terminal density mass {mass}");

    for file in ["rho_T.csv", "f0.csv", "reference_manifest.json"] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
            "{file} differs between reruns"
        );
    }
}

#[test]
fn check_derivatives_passes_and_prints_verdicts() {
    let out = bin().args(["check", "derivatives", "--instances", "4", "--seed", "9"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("PASS spatial-derivatives"), "stdout: {text}");
    assert!(text.contains("PASS loss-gradients"), "stdout: {text}");
}

#[test]
fn report_merges_error_summaries_into_a_table() {
    let dir = temp_dir("report");
    let config = write_config(&dir, TINY_RWPO);
    let out_dir = dir.join("out");
    let run = bin().arg("run").arg(&config).arg("--output").arg(&out_dir).output().unwrap();
    assert_eq!(run.status.code(), Some(0), "stderr: {}", stderr_of(&run));
    let out = bin().arg("report").arg(&out_dir).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("rwpo"), "stdout: {text}");
    assert!(text.contains("err_rho"), "stdout: {text}");
}
