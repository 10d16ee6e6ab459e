//! End-to-end runs through the config layer: artifacts, manifest, plots.

use std::path::{Path, PathBuf};

use coagsim::config::parse_config;
use coagsim::diagnostics::Status;
use coagsim::runner::{diagnose, run, run_file, sha256_hex, sweep, Manifest, EXIT_CERT_FAIL, EXIT_OK};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

const GELLING: &str = r#"{
  "name": "small-gel",
  "kernel": {"name": "multiplicative"},
  "initial": {"preset": "monodisperse", "dim": 1},
  "solver": {"discrete": {"cap": 64, "horizon": 2.0, "record": {"times": [], "every": 0.1}}},
  "diagnostics": {"mass_conservation": {}},
  "seed": 0
}"#;

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn manifest_digests_match_the_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_file(&configs().join("c1_constant_discrete.json"), Some(tmp.path())).unwrap();
    assert_eq!(out.exit_code, EXIT_OK);
    let m = manifest(tmp.path());
    assert_eq!(m.status, "ok");
    assert!(m.artifacts.iter().any(|a| a.path == "moments.csv"));
    assert!(m.artifacts.iter().any(|a| a.path == "moments.svg"));
    for a in &m.artifacts {
        let bytes = std::fs::read(tmp.path().join(&a.path)).unwrap();
        assert_eq!(sha256_hex(&bytes), a.sha256, "{}", a.path);
        assert_eq!(bytes.len() as u64, a.bytes);
    }
}

#[test]
fn plots_are_reproducible_and_gel_is_charted() {
    let parsed = parse_config(GELLING).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(&parsed, Path::new("."), a.path()).unwrap();
    run(&parsed, Path::new("."), b.path()).unwrap();
    for f in ["moments.svg", "gel.svg", "gel.csv", "moments.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let svg = std::fs::read_to_string(a.path().join("gel.svg")).unwrap();
    assert!(svg.contains("<polyline"));
}

#[test]
fn gelling_run_marks_conservation_inapplicable() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&parse_config(GELLING).unwrap(), Path::new("."), tmp.path()).unwrap();
    assert_eq!(out.exit_code, EXIT_OK);
    assert_eq!(out.certificates[0].verdict, Status::Inapplicable);
    let lat = out.lattice.unwrap();
    assert!(lat.dense.gel.last().unwrap() > &0.5);
}

#[test]
fn failing_certificate_sets_exit_code_two() {
    let text = GELLING
        .replace("\"multiplicative\"", "\"constant\"")
        .replace("\"mass_conservation\": {}", "\"mass_conservation\": {\"tol\": 1e-30}");
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&parse_config(&text).unwrap(), Path::new("."), tmp.path()).unwrap();
    // Round-off drift alone exceeds the tolerance.
    assert_eq!(out.exit_code, EXIT_CERT_FAIL);
    assert_eq!(manifest(tmp.path()).status, "certificate-failure");
}

#[test]
fn diagnose_reproduces_the_run_certificates() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_file(&configs().join("c1_constant_regularized.json"), Some(tmp.path())).unwrap();
    let (certs, code) = diagnose(tmp.path(), None).unwrap();
    assert_eq!(code, EXIT_OK);
    assert_eq!(certs, out.certificates);
    let (only, _) = diagnose(tmp.path(), Some(&["mass_conservation".to_string()])).unwrap();
    assert_eq!(only.len(), 1);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let cfg = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(cfg.path(), GELLING).unwrap();
    let out = tempfile::tempdir().unwrap();
    let values = vec!["32".to_string(), "48".to_string()];
    let (rows, code) = sweep(cfg.path(), "solver.discrete.cap", &values, out.path()).unwrap();
    assert_eq!(code, EXIT_OK);
    assert_eq!(rows.len(), 2);
    let csv = std::fs::read_to_string(out.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(out.path().join(&rows[1].dir).join("manifest.json").exists());
}
