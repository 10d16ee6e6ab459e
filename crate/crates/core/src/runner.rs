//! Experiment orchestration: config in, artifacts and certificates out.
//!
//! A run directory holds the resolved `config.json`, the trajectory
//! (`trajectory.csv` with every sample in long format plus `trajectory.json`
//! with metadata), per-output-time state files, moment and flux series,
//! certificates, SVG charts and a `manifest.json` with SHA-256 digests of
//! every artifact. Exit codes: 0 all certificates pass or are inapplicable,
//! 2 some certificate fails, 1 execution error.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{load_config, parse_config, set_path, DiagnosticsSpec, Parsed, RunConfig, SolverKind};
use crate::diagnostics::{
    gel_inequality, gelation_onset, localization_report, mass_conservation, moment_growth, moment_monotonicity,
    Certificate, GelLevel, GelOnset, Status,
};
use crate::discrete::{integrate, DiscreteSystem, LatticeTrajectory};
use crate::error::{CoagError, Result};
use crate::kernels::{audit_envelope, BoundReport, Kernel};
use crate::measures::{fmt_f64, DiscreteState, MeasureState, Particle};
use crate::regularized::solve;
use crate::stochastic::{compare, simulate_ensemble, DeviationReport, McEnsemble, McOptions, Observable};
use crate::trajectory::{Trajectory, TrajectoryMeta, WindowReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_CERT_FAIL: i32 = 2;

/// Cap the global worker pool from `COAGSIM_THREADS`. Returns the cap, if any.
pub fn configure_threads() -> Result<Option<usize>> {
    let Ok(v) = std::env::var("COAGSIM_THREADS") else {
        return Ok(None);
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| CoagError::Config(format!("COAGSIM_THREADS must be a positive integer, got `{v}`")))?;
    if n == 0 {
        return Err(CoagError::Config("COAGSIM_THREADS must be positive".into()));
    }
    // a second initialization (tests, repeated calls) keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub solver: String,
    pub kernel: String,
    pub seed: u64,
    /// `ok`, `certificate-failure` or `error`.
    pub status: String,
    pub error: Option<String>,
    pub warnings: Vec<String>,
    pub notes: Vec<String>,
    pub certificates: BTreeMap<String, Status>,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Artifact writer that records digests as files are produced.
pub struct Outputs {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest::default(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.record(name, bytes);
        Ok(())
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        self.manifest.artifacts.retain(|a| a.path != name);
        self.manifest.artifacts.push(Artifact {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
    }

    /// Register a file some other routine already wrote.
    pub fn register(&mut self, name: &str) -> Result<()> {
        let bytes = std::fs::read(self.dir.join(name))?;
        self.record(name, &bytes);
        Ok(())
    }

    pub fn finish(&mut self) -> Result<()> {
        self.manifest.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(self.dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

fn csv_writer(buf: &mut Vec<u8>) -> csv::Writer<&mut Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(buf)
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut w = csv_writer(&mut buf);
        let err = |e: csv::Error| CoagError::Parse(e.to_string());
        w.write_record(header).map_err(err)?;
        for r in rows {
            w.write_record(&r).map_err(err)?;
        }
        w.flush()?;
    }
    Ok(buf)
}

fn strs(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Time as it appears in file names (`state_t0.5.csv`).
pub fn time_label(t: f64) -> String {
    format!("{t}")
}

/// Everything in a trajectory except the samples themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub dim: usize,
    pub times: Vec<f64>,
    pub flux: Vec<Vec<f64>>,
    pub pruned: Vec<Vec<f64>>,
    pub windows: Vec<WindowReport>,
    pub meta: TrajectoryMeta,
}

/// `trajectory.csv`: one row per particle, `t,x1..xd,w`.
pub fn trajectory_csv(traj: &Trajectory) -> Result<Vec<u8>> {
    let mut header = vec!["t".to_string()];
    header.extend((1..=traj.dim).map(|k| format!("x{k}")));
    header.push("w".into());
    let rows = traj.samples.iter().flat_map(|s| {
        s.particles.iter().map(move |p| {
            let mut r = vec![fmt_f64(s.time)];
            r.extend(p.x.iter().map(|v| fmt_f64(*v)));
            r.push(fmt_f64(p.w));
            r
        })
    });
    csv_bytes(&header, rows)
}

pub fn trajectory_header(traj: &Trajectory) -> TrajectoryHeader {
    TrajectoryHeader {
        dim: traj.dim,
        times: traj.times(),
        flux: traj.flux.clone(),
        pruned: traj.pruned.clone(),
        windows: traj.windows.clone(),
        meta: traj.meta.clone(),
    }
}

/// Read a trajectory written by [`write_trajectory`].
pub fn load_trajectory(dir: &Path) -> Result<Trajectory> {
    let header: TrajectoryHeader = serde_json::from_str(&std::fs::read_to_string(dir.join("trajectory.json"))?)?;
    let d = header.dim;
    let mut states: Vec<MeasureState> = header.times.iter().map(|&t| MeasureState::empty(d, t)).collect();
    let mut rdr = csv::ReaderBuilder::new()
        .from_path(dir.join("trajectory.csv"))
        .map_err(|e| CoagError::Parse(e.to_string()))?;
    let mut k = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CoagError::Parse(e.to_string()))?;
        let vals = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| CoagError::Parse(format!("trajectory.csv row {}: {e}", line + 1)))?;
        if vals.len() != d + 2 {
            return Err(CoagError::Parse(format!("trajectory.csv row {} has {} fields", line + 1, vals.len())));
        }
        while k < states.len() && states[k].time != vals[0] {
            k += 1;
        }
        let state = states
            .get_mut(k)
            .ok_or_else(|| CoagError::Parse(format!("trajectory.csv row {}: unknown time {}", line + 1, vals[0])))?;
        state.particles.push(Particle {
            x: vals[1..=d].to_vec(),
            w: vals[d + 1],
        });
    }
    let mut traj = Trajectory::new(d, header.meta);
    for ((s, f), p) in states.into_iter().zip(header.flux).zip(header.pruned) {
        traj.push(s, f, p)?;
    }
    traj.windows = header.windows;
    Ok(traj)
}

fn moments_csv(traj: &Trajectory, kernel: &Kernel) -> Result<Vec<u8>> {
    let wf = kernel.weight_fn();
    let mut header = strs(&["t", "M0", "Mhalf", "M1", "Momega"]);
    header.extend((1..=traj.dim).map(|k| format!("mass_{k}")));
    let rows = traj.samples.iter().map(|s| {
        let momega: f64 = s.particles.iter().map(|p| p.w * wf.at_norm(p.norm())).sum();
        let mut r = vec![
            fmt_f64(s.time),
            fmt_f64(s.total_weight()),
            fmt_f64(s.moment(0.5)),
            fmt_f64(s.moment(1.0)),
            fmt_f64(momega),
        ];
        r.extend(s.mass_vector().iter().map(|v| fmt_f64(*v)));
        r
    });
    csv_bytes(&header, rows)
}

fn flux_csv(traj: &Trajectory) -> Result<Vec<u8>> {
    let mut header = vec!["t".to_string()];
    header.extend((1..=traj.dim).map(|k| format!("flux_{k}")));
    header.extend((1..=traj.dim).map(|k| format!("pruned_{k}")));
    let rows = traj.samples.iter().zip(&traj.flux).zip(&traj.pruned).map(|((s, f), p)| {
        let mut r = vec![fmt_f64(s.time)];
        r.extend(f.iter().chain(p).map(|v| fmt_f64(*v)));
        r
    });
    csv_bytes(&header, rows)
}

fn windows_csv(traj: &Trajectory) -> Result<Vec<u8>> {
    let header = strs(&[
        "t_start",
        "length",
        "steps",
        "iterations",
        "max_ratio",
        "ball_radius",
        "theorem_length",
        "cells",
    ]);
    let rows = traj.windows.iter().map(|w| {
        vec![
            fmt_f64(w.t_start),
            fmt_f64(w.length),
            w.steps.to_string(),
            w.iterations.to_string(),
            w.max_ratio().map_or(String::new(), fmt_f64),
            fmt_f64(w.ball_radius),
            fmt_f64(w.theorem_length),
            w.cells.to_string(),
        ]
    });
    csv_bytes(&header, rows)
}

/// Write the trajectory files common to all solvers.
pub fn write_trajectory(out: &mut Outputs, traj: &Trajectory, kernel: &Kernel) -> Result<()> {
    out.write("trajectory.csv", &trajectory_csv(traj)?)?;
    let header = serde_json::to_string_pretty(&trajectory_header(traj))? + "\n";
    out.write("trajectory.json", header.as_bytes())?;
    out.write("moments.csv", &moments_csv(traj, kernel)?)?;
    out.write("flux.csv", &flux_csv(traj)?)?;
    Ok(())
}

fn write_states(out: &mut Outputs, traj: &Trajectory, times: &[f64]) -> Result<()> {
    for &t in times {
        if let Some(s) = traj.at_output(t) {
            out.write(&format!("state_t{}.csv", time_label(t)), s.to_csv_string().as_bytes())?;
        }
    }
    Ok(())
}

fn write_lattice(out: &mut Outputs, lt: &LatticeTrajectory, times: &[f64]) -> Result<()> {
    for &t in times {
        if let Some(r) = lt.record_at(t) {
            let mut buf = Vec::new();
            r.write_csv(&mut buf)?;
            out.write(&format!("lattice_t{}.csv", time_label(t)), &buf)?;
        }
    }
    let rows = lt.dense.t.iter().zip(&lt.dense.gel).map(|(t, g)| vec![fmt_f64(*t), fmt_f64(*g)]);
    out.write("gel.csv", &csv_bytes(&strs(&["t", "gel_mass"]), rows)?)?;
    Ok(())
}

fn gel_ladder_csv(levels: &[GelLevel]) -> Result<Vec<u8>> {
    let rows = levels
        .iter()
        .flat_map(|l| l.times.iter().zip(&l.mass).map(move |(t, m)| vec![fmt_f64(l.level), fmt_f64(*t), fmt_f64(*m)]));
    csv_bytes(&strs(&["level", "t", "M1"]), rows)
}

fn read_gel_ladder(path: &Path) -> Result<Vec<GelLevel>> {
    let (_, cols) = crate::plots::read_columns(path)?;
    if cols.len() != 3 {
        return Err(CoagError::Parse("gel_ladder.csv needs columns level,t,M1".into()));
    }
    let mut out: Vec<GelLevel> = Vec::new();
    for i in 0..cols[0].len() {
        let (l, t, m) = (cols[0][i], cols[1][i], cols[2][i]);
        match out.last_mut() {
            Some(g) if g.level == l => {
                g.times.push(t);
                g.mass.push(m);
            }
            _ => out.push(GelLevel {
                level: l,
                times: vec![t],
                mass: vec![m],
            }),
        }
    }
    Ok(out)
}

/// Results of evaluating the selected certificates.
#[derive(Debug, Clone, Default)]
pub struct Certified {
    pub certificates: Vec<Certificate>,
    pub onset: Option<GelOnset>,
    pub localization: Option<Vec<(f64, f64)>>,
}

/// Evaluate every certificate selected in `diag` on `traj`.
pub fn certify(diag: &DiagnosticsSpec, traj: &Trajectory, ladder: Option<&[GelLevel]>) -> Certified {
    let mut out = Certified::default();
    let certs = &mut out.certificates;
    if let Some(m) = &diag.mass_conservation {
        certs.push(mass_conservation(traj, m.tol));
    }
    if let Some(m) = &diag.moment_monotonicity {
        for &a in &m.alphas {
            let mut c = moment_monotonicity(traj, a, m.r);
            c.name = format!("moment_monotonicity[alpha={a}]");
            certs.push(c);
        }
    }
    if diag.gelation_onset.is_some() {
        let onset = match ladder {
            Some(l) => gelation_onset(l),
            None => gelation_onset(&[]),
        };
        certs.push(onset.certificate.clone());
        out.onset = Some(onset);
    }
    if diag.gel_inequality.is_some() {
        match traj.meta.gel {
            Some(gel) => {
                for spec in diag.gel_specs(gel) {
                    let mut c = gel_inequality(traj, &spec, traj.horizon()).certificate;
                    c.name = format!("gel_inequality[R={},T={}]", spec.r, spec.t_start);
                    certs.push(c);
                }
            }
            None => certs.push(Certificate {
                name: "gel_inequality".into(),
                verdict: Status::Inapplicable,
                slack: 0.0,
                tolerance: 0.0,
                digest: String::new(),
                reason: Some("kernel has no gelation lower bound".into()),
                details: BTreeMap::new(),
            }),
        }
    }
    let homogeneous_gamma = traj.meta.homogeneity.map(|h| h.gamma);
    if let Some(g) = &diag.moment_growth {
        let gp = g.gamma_prime.or(homogeneous_gamma).unwrap_or(0.0);
        certs.push(moment_growth(traj, g.k, gp));
    }
    if let Some(l) = &diag.localization {
        let gp = homogeneous_gamma.filter(|g| (0.0..1.0).contains(g)).unwrap_or(0.0);
        let rep = localization_report(traj, &l.spec(gp));
        certs.push(rep.certificate);
        if !rep.series.is_empty() {
            out.localization = Some(rep.series);
        }
    }
    out
}

fn write_certified(out: &mut Outputs, c: &Certified) -> Result<()> {
    let json = serde_json::to_string_pretty(&c.certificates)? + "\n";
    out.write("certificates.json", json.as_bytes())?;
    if let Some(series) = &c.localization {
        let rows = series.iter().map(|(t, d)| vec![fmt_f64(*t), fmt_f64(*d)]);
        out.write("localization.csv", &csv_bytes(&strs(&["t", "D"]), rows)?)?;
    }
    if let Some(o) = &c.onset {
        let rows = o
            .levels
            .iter()
            .zip(&o.onsets)
            .map(|(l, t)| vec![fmt_f64(*l), t.map_or(String::new(), fmt_f64)]);
        out.write("gel_onset.csv", &csv_bytes(&strs(&["level", "onset"]), rows)?)?;
    }
    for cert in &c.certificates {
        out.manifest.certificates.insert(cert.name.clone(), cert.verdict);
    }
    Ok(())
}

fn plots(out: &mut Outputs) -> Result<()> {
    let p = crate::plots::emit_plots(&out.dir)?;
    for f in &p.files {
        out.register(f)?;
    }
    out.manifest.notes.extend(p.notes);
    Ok(())
}

fn mc_moments_csv(ens: &McEnsemble) -> Result<Vec<u8>> {
    let r = ens.replicas.len();
    let m0 = ens.observable(|s| s.total_weight());
    let m1 = ens.observable(|s| s.moment(1.0));
    let mut header = strs(&["t", "M0_mean", "M0_stderr", "M1_mean", "M1_stderr", "largest_mean"]);
    header.extend((0..r).map(|i| format!("M0_r{i}")));
    header.extend((0..r).map(|i| format!("largest_r{i}")));
    let rows = ens.times().into_iter().enumerate().map(|(k, t)| {
        let largest: Vec<f64> = ens.replicas.iter().map(|rep| rep.stats.largest_fraction[k]).collect();
        let mut row = vec![
            fmt_f64(t),
            fmt_f64(m0[k].0),
            fmt_f64(m0[k].1),
            fmt_f64(m1[k].0),
            fmt_f64(m1[k].1),
            fmt_f64(largest.iter().sum::<f64>() / r as f64),
        ];
        row.extend(ens.replicas.iter().map(|rep| fmt_f64(rep.trajectory.samples[k].total_weight())));
        row.extend(largest.iter().map(|v| fmt_f64(*v)));
        row
    });
    csv_bytes(&header, rows)
}

fn compare_csv(rep: &DeviationReport) -> Result<Vec<u8>> {
    let rows = rep.rows.iter().map(|d| {
        vec![
            fmt_f64(d.time),
            d.observable.clone(),
            fmt_f64(d.empirical),
            fmt_f64(d.stderr),
            fmt_f64(d.deterministic),
            fmt_f64(d.z),
        ]
    });
    csv_bytes(&strs(&["t", "observable", "empirical", "stderr", "deterministic", "z"]), rows)
}

/// In-memory results of a run, alongside what was written to disk.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub manifest: Manifest,
    pub certificates: Vec<Certificate>,
    pub trajectory: Trajectory,
    pub lattice: Option<LatticeTrajectory>,
    pub ensemble: Option<McEnsemble>,
    pub comparison: Option<DeviationReport>,
    pub onset: Option<GelOnset>,
    pub localization: Option<Vec<(f64, f64)>>,
}

/// Run a parsed config. `base` resolves relative input files; artifacts go to `out_dir`.
/// On error a manifest with status `error` is still written.
pub fn run(parsed: &Parsed, base: &Path, out_dir: &Path) -> Result<RunOutcome> {
    let mut out = Outputs::new(out_dir)?;
    let c = &parsed.config;
    out.manifest.name = c.name.clone().unwrap_or_else(|| "run".into());
    out.manifest.seed = c.seed;
    out.manifest.kernel = c.kernel.name.clone();
    out.manifest.warnings = parsed.warnings.iter().map(|w| w.to_string()).collect();
    match execute(c, base, &mut out) {
        Ok(mut outcome) => {
            let failed = outcome.certificates.iter().any(|c| c.verdict == Status::Fail);
            outcome.exit_code = if failed { EXIT_CERT_FAIL } else { EXIT_OK };
            out.manifest.status = if failed { "certificate-failure" } else { "ok" }.into();
            out.finish()?;
            outcome.manifest = out.manifest.clone();
            Ok(outcome)
        }
        Err(e) => {
            out.manifest.status = "error".into();
            out.manifest.error = Some(e.to_string());
            out.finish()?;
            Err(e)
        }
    }
}

fn execute(c: &RunConfig, base: &Path, out: &mut Outputs) -> Result<RunOutcome> {
    let kernel = c.kernel.build()?;
    let f0 = c.initial.build(base)?;
    let kind = c
        .solver
        .kind()
        .ok_or_else(|| CoagError::Config("exactly one solver block is required".into()))?;
    let resolved = serde_json::to_string_pretty(c)? + "\n";
    out.write("config.json", resolved.as_bytes())?;

    let mut lattice = None;
    let mut ensemble = None;
    let mut comparison = None;
    let mut ladder: Option<Vec<GelLevel>> = None;
    let traj = match kind {
        SolverKind::Regularized => {
            let spec = c.solver.regularized.as_ref().expect("kind checked");
            out.manifest.solver = "regularized".into();
            let params = spec.params(f0.dim)?;
            let traj = solve(&kernel, &f0, spec.horizon, &params)?;
            write_trajectory(out, &traj, &kernel)?;
            out.write("windows.csv", &windows_csv(&traj)?)?;
            write_states(out, &traj, &spec.output_times)?;
            if let Some(o) = &c.diagnostics.gelation_onset {
                let mut levels = Vec::new();
                for &l in &o.levels {
                    let tr = if (1.0 / l - spec.eps).abs() <= 1e-15 {
                        traj.clone()
                    } else {
                        let mut s = spec.clone();
                        s.eps = 1.0 / l;
                        s.output_times.clear();
                        solve(&kernel, &f0, spec.horizon, &s.params(f0.dim)?)?
                    };
                    levels.push(GelLevel::from_trajectory(l, &tr));
                }
                ladder = Some(levels);
            }
            traj
        }
        SolverKind::Discrete => {
            let spec = c.solver.discrete.as_ref().expect("kind checked");
            out.manifest.solver = "discrete".into();
            let n0 = DiscreteState::from_measure(&f0, spec.cap)?;
            let opts = spec.options();
            let sys = DiscreteSystem::new(kernel.clone(), f0.dim, spec.cap)?;
            let lt = integrate(&sys, &n0, spec.horizon, &opts)?;
            let traj = lt.to_trajectory()?;
            write_trajectory(out, &traj, &kernel)?;
            let mut lattice_times = spec.record.times.clone();
            lattice_times.push(spec.horizon);
            write_lattice(out, &lt, &lattice_times)?;
            if let Some(o) = &c.diagnostics.gelation_onset {
                let mut levels = Vec::new();
                for &l in &o.levels {
                    let cap = l.round() as u64;
                    if cap == spec.cap {
                        levels.push(GelLevel::from_dense(l, &lt.dense));
                        continue;
                    }
                    let sys = DiscreteSystem::new(kernel.clone(), f0.dim, cap)?;
                    let n0 = DiscreteState::from_measure(&f0, cap)?;
                    let mut o2 = opts.clone();
                    o2.record_times.clear();
                    let r = integrate(&sys, &n0, spec.horizon, &o2)?;
                    levels.push(GelLevel::from_dense(l, &r.dense));
                }
                ladder = Some(levels);
            }
            lattice = Some(lt);
            traj
        }
        SolverKind::MonteCarlo => {
            let spec = c.solver.montecarlo.as_ref().expect("kind checked");
            out.manifest.solver = "montecarlo".into();
            let opts = McOptions::new(spec.n, spec.replicas, spec.seed.unwrap_or(c.seed), spec.record_times());
            let ens = simulate_ensemble(&kernel, &f0, spec.horizon, &opts)?;
            let traj = ens.pooled()?;
            write_trajectory(out, &traj, &kernel)?;
            out.write("mc_moments.csv", &mc_moments_csv(&ens)?)?;
            write_states(out, &traj, &opts.record_times)?;
            if let Some(t) = ens.gel_flag_time() {
                out.manifest.notes.push(format!("largest particle above 1% of mass from t = {t}"));
            }
            if let Some(r) = &spec.reference {
                let sys = DiscreteSystem::new(kernel.clone(), f0.dim, r.cap)?;
                let n0 = DiscreteState::from_measure(&f0, r.cap)?;
                let mut o = crate::discrete::IntegrateOptions::default();
                if let Some(rt) = r.rtol {
                    o.rtol = rt;
                }
                o.record_times = opts.record_times.clone();
                let det = integrate(&sys, &n0, spec.horizon, &o)?.to_trajectory()?;
                let mut obs = vec![Observable::M0, Observable::M1];
                obs.extend(r.atoms.iter().cloned().map(Observable::Atom));
                let rep = compare(&ens, &det, &obs)?;
                out.write("mc_compare.csv", &compare_csv(&rep)?)?;
                comparison = Some(rep);
            }
            ensemble = Some(ens);
            traj
        }
    };
    if let Some(l) = &ladder {
        out.write("gel_ladder.csv", &gel_ladder_csv(l)?)?;
    }
    if !traj.meta.notes.is_empty() {
        out.manifest.notes.extend(traj.meta.notes.iter().cloned());
    }
    let certified = certify(&c.diagnostics, &traj, ladder.as_deref());
    write_certified(out, &certified)?;
    plots(out)?;
    Ok(RunOutcome {
        exit_code: EXIT_OK,
        manifest: Manifest::default(),
        certificates: certified.certificates,
        trajectory: traj,
        lattice,
        ensemble,
        comparison,
        onset: certified.onset,
        localization: certified.localization,
    })
}

/// Load a config file and run it. The output directory defaults to the
/// config's `output_dir`, then to `out/<name>` beside the config.
pub fn run_file(config: &Path, out_dir: Option<&Path>) -> Result<RunOutcome> {
    let parsed = load_config(config)?;
    let base = config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let dir = resolve_out_dir(&parsed.config, &base, out_dir);
    run(&parsed, &base, &dir)
}

fn resolve_out_dir(c: &RunConfig, base: &Path, explicit: Option<&Path>) -> PathBuf {
    match (explicit, &c.output_dir) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(d)) => base.join(d),
        (None, None) => base.join("out").join(c.name.clone().unwrap_or_else(|| "run".into())),
    }
}

/// Exit code for a finished (or failed) run.
pub fn exit_code(r: &Result<RunOutcome>) -> i32 {
    match r {
        Ok(o) => o.exit_code,
        Err(_) => EXIT_ERROR,
    }
}

/// Re-evaluate certificates on a run directory.
pub fn diagnose(dir: &Path, certs: Option<&[String]>) -> Result<(Vec<Certificate>, i32)> {
    let parsed = load_config(&dir.join("config.json"))?;
    let traj = load_trajectory(dir)?;
    let diag = match certs {
        Some(names) => parsed.config.diagnostics.select(names)?,
        None => parsed.config.diagnostics.clone(),
    };
    let ladder_path = dir.join("gel_ladder.csv");
    let ladder = if ladder_path.exists() { Some(read_gel_ladder(&ladder_path)?) } else { None };
    let certified = certify(&diag, &traj, ladder.as_deref());
    let mut out = Outputs::new(dir)?;
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        out.manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        out.manifest.certificates.clear();
    }
    write_certified(&mut out, &certified)?;
    plots(&mut out)?;
    let failed = certified.certificates.iter().any(|c| c.verdict == Status::Fail);
    if out.manifest.status != "error" {
        out.manifest.status = if failed { "certificate-failure" } else { "ok" }.into();
    }
    out.finish()?;
    Ok((certified.certificates, if failed { EXIT_CERT_FAIL } else { EXIT_OK }))
}

/// Envelope audit of a config's kernel. Accepts a full run config or a bare kernel block.
pub fn validate_kernel(text: &str, dim: usize, random: usize, seed: u64) -> Result<BoundReport> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let block = value.get("kernel").cloned().unwrap_or(value);
    let spec: crate::config::KernelSpec = serde_path_to_error::deserialize(block)
        .map_err(|e| CoagError::Config(format!("kernel.{}: {}", e.path(), e.inner())))?;
    let kernel = spec.build()?;
    audit_envelope(&kernel, dim, 40, random, seed)
}

/// One row of a sweep summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub dir: String,
    pub exit_code: i32,
    pub passed: usize,
    pub failed: usize,
    pub error: Option<String>,
}

/// Run `config` once per value of the dotted parameter `param`.
pub fn sweep(config: &Path, param: &str, values: &[String], out_dir: &Path) -> Result<(Vec<SweepRow>, i32)> {
    let text = std::fs::read_to_string(config)?;
    let base = config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for (i, v) in values.iter().enumerate() {
        let value: serde_json::Value = serde_json::from_str(v).unwrap_or(serde_json::Value::String(v.clone()));
        let mut d = doc.clone();
        set_path(&mut d, param, value)?;
        let dir_name = format!("{i:03}_{}", v.replace(['/', '\\', ' '], "_"));
        let dir = out_dir.join(&dir_name);
        let result = parse_config(&d.to_string()).and_then(|p| run(&p, &base, &dir));
        let row = match &result {
            Ok(o) => SweepRow {
                value: v.clone(),
                dir: dir_name,
                exit_code: o.exit_code,
                passed: o.certificates.iter().filter(|c| c.verdict == Status::Pass).count(),
                failed: o.certificates.iter().filter(|c| c.verdict == Status::Fail).count(),
                error: None,
            },
            Err(e) => SweepRow {
                value: v.clone(),
                dir: dir_name,
                exit_code: EXIT_ERROR,
                passed: 0,
                failed: 0,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    let body = rows.iter().map(|r| {
        vec![
            r.value.clone(),
            r.dir.clone(),
            r.exit_code.to_string(),
            r.passed.to_string(),
            r.failed.to_string(),
            r.error.clone().unwrap_or_default(),
        ]
    });
    let bytes = csv_bytes(&strs(&[param, "dir", "exit_code", "passed", "failed", "error"]), body)?;
    let mut f = std::fs::File::create(out_dir.join("sweep.csv"))?;
    f.write_all(&bytes)?;
    let code = if rows.iter().any(|r| r.exit_code == EXIT_ERROR) {
        EXIT_ERROR
    } else if rows.iter().any(|r| r.exit_code == EXIT_CERT_FAIL) {
        EXIT_CERT_FAIL
    } else {
        EXIT_OK
    };
    Ok((rows, code))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parsed(text: &str) -> Parsed {
        parse_config(text).unwrap()
    }

    const CONSTANT: &str = r#"{
        "name": "constant",
        "kernel": {"name": "constant", "c0": 2.0},
        "initial": {"preset": "monodisperse"},
        "solver": {"discrete": {"cap": 64, "horizon": 2.0, "record": {"times": [1.0], "every": 0.25}}},
        "diagnostics": {"mass_conservation": {"tol": 1e-6}, "moment_monotonicity": {"alphas": [0.0, 1.0]}}
    }"#;

    #[test]
    fn discrete_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let o = run(&parsed(CONSTANT), Path::new("."), dir.path()).unwrap();
        assert_eq!(o.exit_code, EXIT_OK);
        for f in ["config.json", "trajectory.csv", "moments.csv", "lattice_t1.csv", "gel.csv", "certificates.json", "moments.svg", "manifest.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        let moments = m.artifacts.iter().find(|a| a.path == "moments.csv").unwrap();
        assert_eq!(moments.sha256, sha256_hex(&std::fs::read(dir.path().join("moments.csv")).unwrap()));
    }

    #[test]
    fn trajectory_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let o = run(&parsed(CONSTANT), Path::new("."), dir.path()).unwrap();
        let back = load_trajectory(dir.path()).unwrap();
        assert_eq!(back, o.trajectory);
        let (certs, code) = diagnose(dir.path(), None).unwrap();
        assert_eq!(code, EXIT_OK);
        assert_eq!(certs, o.certificates);
    }

    #[test]
    fn gelling_kernel_conservation_is_inapplicable() {
        let text = CONSTANT.replace(r#""name": "constant", "c0": 2.0"#, r#""name": "multiplicative""#);
        let dir = tempfile::tempdir().unwrap();
        let o = run(&parsed(&text), Path::new("."), dir.path()).unwrap();
        assert_eq!(o.certificates[0].verdict, Status::Inapplicable);
        assert_eq!(o.exit_code, EXIT_OK);
    }

    #[test]
    fn corrupted_initial_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("init.csv"), "garbage\n1,2\n").unwrap();
        let text = CONSTANT.replace(r#"{"preset": "monodisperse"}"#, r#"{"file": "init.csv"}"#);
        let out = dir.path().join("out");
        let r = run(&parsed(&text), dir.path(), &out);
        assert_eq!(exit_code(&r), EXIT_ERROR);
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m.status, "error");
    }

    #[test]
    fn rerun_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run(&parsed(CONSTANT), Path::new("."), a.path()).unwrap();
        run(&parsed(CONSTANT), Path::new("."), b.path()).unwrap();
        for f in ["trajectory.csv", "moments.csv", "gel.csv", "moments.svg", "manifest.json"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }
}
