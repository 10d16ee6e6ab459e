//! The `coagsim` binary: subcommands and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coagsim"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn text(o: &Output) -> (String, String) {
    (String::from_utf8_lossy(&o.stdout).into_owned(), String::from_utf8_lossy(&o.stderr).into_owned())
}

const SMALL: &str = r#"{
  "name": "small",
  "kernel": {"name": "constant", "c0": 2.0},
  "initial": {"preset": "monodisperse", "dim": 1},
  "solver": {"discrete": {"cap": 32, "horizon": 1.0, "record": {"times": [0.5, 1.0]}}},
  "diagnostics": {"mass_conservation": {"tol": TOL}},
  "seed": 0
}"#;

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn run_passes_and_writes_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = bin().arg("run").arg(configs().join("c1_constant_discrete.json")).arg("--out").arg(&out).output().unwrap();
    let (stdout, _) = text(&o);
    assert_eq!(o.status.code(), Some(0), "{stdout}");
    assert!(stdout.contains("mass_conservation"));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "ok");
}

#[test]
fn failing_certificate_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &SMALL.replace("TOL", "1e-30"));
    let o = bin().arg("run").arg(&cfg).arg("--out").arg(tmp.path().join("o")).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).0.contains("FAIL"));
}

#[test]
fn bad_eps_exits_one_with_the_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let body = r#"{
      "kernel": {"name": "constant"},
      "initial": {"preset": "monodisperse", "dim": 1},
      "solver": {"regularized": {"eps": 1.5, "horizon": 1.0, "output_times": [1.0]}},
      "seed": 0
    }"#;
    let cfg = write_config(tmp.path(), "bad.json", body);
    let o = bin().arg("run").arg(&cfg).arg("--out").arg(tmp.path().join("o")).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).1.contains("solver.regularized.eps: must lie in (0,1)"), "{}", text(&o).1);
}

#[test]
fn unknown_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &SMALL.replace("TOL", "1e-6").replace("\"seed\"", "\"sead\""));
    let o = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).1.contains("sead"));
}

#[test]
fn validate_kernel_prints_a_passing_report() {
    let o = bin()
        .args(["validate-kernel"])
        .arg(configs().join("c5_transition.json"))
        .args(["--samples", "2000", "--seed", "3"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", text(&o).1);
    let report: serde_json::Value = serde_json::from_str(&text(&o).0).unwrap();
    assert_eq!(report["pass"], true);
}

#[test]
fn validate_kernel_flags_a_wrong_envelope() {
    let tmp = tempfile::tempdir().unwrap();
    let body = r#"{"name": "multiplicative", "envelope": {"beta": 0.0, "gamma1": 0.0, "lambda1": 0.0, "gamma2": 0.0, "lambda2": 0.0, "c2": 1.0}}"#;
    let cfg = write_config(tmp.path(), "k.json", body);
    let o = bin().arg("validate-kernel").arg(&cfg).args(["--samples", "500"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", text(&o).1);
}

#[test]
fn diagnose_rechecks_a_finished_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &SMALL.replace("TOL", "1e-6"));
    let out = tmp.path().join("o");
    assert_eq!(bin().arg("run").arg(&cfg).arg("--out").arg(&out).output().unwrap().status.code(), Some(0));
    let o = bin().arg("diagnose").arg(&out).args(["--certs", "mass_conservation"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o).0.contains("mass_conservation"));
}

#[test]
fn mc_requires_a_montecarlo_block() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &SMALL.replace("TOL", "1e-6"));
    let o = bin().arg("mc").arg(&cfg).arg("--out").arg(tmp.path().join("o")).output().unwrap();
    assert_eq!(o.status.code(), Some(1));

    let o = bin().arg("mc").arg(configs().join("c9_montecarlo.json")).arg("--out").arg(tmp.path().join("mc")).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", text(&o).1);
    assert!(text(&o).0.contains("max |z|"));
    assert!(tmp.path().join("mc").join("mc_compare.csv").exists());
}

#[test]
fn sweep_runs_every_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &SMALL.replace("TOL", "1e-6"));
    let out = tmp.path().join("sw");
    let o = bin()
        .arg("sweep")
        .arg(&cfg)
        .args(["--param", "solver.discrete.cap", "--values", "16,32"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", text(&o).1);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
