//! JSON run configuration.
//!
//! Parsing is strict: unknown keys and type mismatches are errors reported
//! with the dotted path of the offending field. Semantic checks run after
//! parsing and collect every problem before failing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{GelTestSpec, LocalizationSpec, Schedule};
use crate::discrete::IntegrateOptions;
use crate::error::{CoagError, Result};
use crate::kernels::{check_eps, EnvelopeParams, GelParams, Kernel};
use crate::measures::{BinGrid, MeasureState};
use crate::regularized::{RegularizationParams, SurvivalRule, WindowPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub name: String,
    #[serde(default = "one")]
    pub c0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope: Option<EnvelopeParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gel: Option<GelParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    /// Power-law exponents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl KernelSpec {
    pub fn build(&self) -> Result<Kernel> {
        let c0 = self.c0;
        if !(c0 > 0.0 && c0.is_finite()) {
            return Err(CoagError::Parameter("c0 must be positive".into()));
        }
        let mut k = match self.name.as_str() {
            "constant" => Kernel::constant(c0),
            "additive" => Kernel::additive(c0),
            "multiplicative" => Kernel::multiplicative(c0),
            "diffusion" => Kernel::diffusion(c0),
            "ballistic" => Kernel::ballistic(c0),
            "transition" => Kernel::transition(c0),
            "product" => {
                let m = self
                    .matrix
                    .clone()
                    .ok_or_else(|| CoagError::Config("product kernel needs `matrix`".into()))?;
                let m = m.into_iter().map(|row| row.into_iter().map(|v| v * c0).collect()).collect();
                Kernel::product(m)?
            }
            "power-law" => {
                let (Some(l), Some(g)) = (self.lambda, self.gamma) else {
                    return Err(CoagError::Config("power-law kernel needs `lambda` and `gamma`".into()));
                };
                Kernel::power_law(c0, l, g)?
            }
            other => return Err(CoagError::Config(format!("unknown kernel `{other}`"))),
        };
        if let Some(env) = self.envelope {
            k = k.with_envelope(env)?;
        }
        if self.gel.is_some() {
            k = k.with_gel(self.gel)?;
        }
        Ok(k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    pub x: Vec<f64>,
    pub w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Unit weight at `e_1`.
    Monodisperse,
    /// Weight 1/2 at each of `e_1` and `e_2`.
    BiSpecies,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Vec<Atom>>,
    /// State CSV, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

impl InitialSpec {
    pub fn preset(p: Preset, dim: usize) -> Self {
        Self {
            preset: Some(p),
            dim: Some(dim),
            atoms: None,
            file: None,
        }
    }

    pub fn build(&self, base: &Path) -> Result<MeasureState> {
        let set = [self.preset.is_some(), self.atoms.is_some(), self.file.is_some()];
        if set.iter().filter(|b| **b).count() != 1 {
            return Err(CoagError::Config("initial: give exactly one of `preset`, `atoms`, `file`".into()));
        }
        if let Some(p) = self.preset {
            let dim = self.dim.unwrap_or(match p {
                Preset::Monodisperse => 1,
                Preset::BiSpecies => 2,
            });
            let unit = |k: usize| {
                let mut e = vec![0.0; dim];
                e[k] = 1.0;
                e
            };
            return match p {
                Preset::Monodisperse if dim >= 1 => MeasureState::from_atoms(dim, 0.0, [(unit(0), 1.0)]),
                Preset::BiSpecies if dim >= 2 => MeasureState::from_atoms(dim, 0.0, [(unit(0), 0.5), (unit(1), 0.5)]),
                _ => Err(CoagError::Config(format!("preset {p:?} unavailable in dimension {dim}"))),
            };
        }
        if let Some(atoms) = &self.atoms {
            let dim = self
                .dim
                .or_else(|| atoms.first().map(|a| a.x.len()))
                .ok_or_else(|| CoagError::Config("initial: empty atom list".into()))?;
            return MeasureState::from_atoms(dim, 0.0, atoms.iter().map(|a| (a.x.clone(), a.w)));
        }
        let path = base.join(self.file.as_ref().expect("checked above"));
        let file = std::fs::File::open(&path)?;
        let state = MeasureState::read_csv(std::io::BufReader::new(file))?;
        if let Some(d) = self.dim {
            if d != state.dim {
                return Err(CoagError::Config(format!("initial file has dimension {}, config says {d}", state.dim)));
            }
        }
        Ok(state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angular: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice_cap: Option<f64>,
}

/// Output schedule shared by all solvers: explicit times, a uniform grid, or both.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule1d {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub times: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub every: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizedSpec {
    pub eps: f64,
    pub horizon: f64,
    #[serde(default)]
    pub output_times: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub picard_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_picard_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_per_window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<WindowPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survival: Option<SurvivalRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune_rel: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_cells: Option<usize>,
}

impl RegularizedSpec {
    pub fn params(&self, dim: usize) -> Result<RegularizationParams> {
        let mut p = RegularizationParams::new(dim, self.eps)?;
        if let Some(g) = &self.grid {
            let mut grid = BinGrid::new(dim, self.eps)?;
            if let Some(q) = g.q {
                grid = grid.with_q(q)?;
            }
            if let Some(a) = g.angular {
                grid = grid.with_angular(a)?;
            }
            if let Some(c) = g.lattice_cap {
                grid = grid.with_lattice_cap(c)?;
            }
            p.grid = grid;
        }
        if let Some(v) = self.picard_tol {
            p.picard_tol = v;
        }
        if let Some(v) = self.max_picard_iters {
            p.max_picard_iters = v;
        }
        if let Some(v) = self.steps_per_window {
            p.steps_per_window = v;
        }
        if let Some(v) = self.window {
            p.window = v;
        }
        if let Some(v) = self.survival {
            p.survival = v;
        }
        if let Some(v) = self.prune_rel {
            p.prune_rel = v;
        }
        if let Some(v) = self.max_cells {
            p.max_cells = v;
        }
        p.output_times = self.output_times.clone();
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverflowSpec {
    Absorb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteSpec {
    pub cap: u64,
    pub horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overflow: Option<OverflowSpec>,
    #[serde(default)]
    pub record: Schedule1d,
}

impl DiscreteSpec {
    pub fn options(&self) -> IntegrateOptions {
        let mut o = IntegrateOptions::default();
        if let Some(v) = self.rtol {
            o.rtol = v;
        }
        if let Some(v) = self.atol {
            o.atol = v;
        }
        o.record_times = expand_schedule(&self.record, self.horizon);
        o
    }
}

/// Deterministic reference for Monte Carlo z-scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    pub cap: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtol: Option<f64>,
    /// Compositions whose weights are compared, in addition to `M0` and `M1`.
    #[serde(default)]
    pub atoms: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSpec {
    #[serde(rename = "N")]
    pub n: usize,
    pub replicas: usize,
    /// Overrides the run's master seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub record_times: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_every: Option<f64>,
    pub horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceSpec>,
}

impl MonteCarloSpec {
    pub fn record_times(&self) -> Vec<f64> {
        expand_schedule(
            &Schedule1d {
                times: self.record_times.clone(),
                every: self.record_every,
            },
            self.horizon,
        )
    }
}

/// Exactly one block must be present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularized: Option<RegularizedSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discrete: Option<DiscreteSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub montecarlo: Option<MonteCarloSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Regularized,
    Discrete,
    MonteCarlo,
}

impl SolverSpec {
    pub fn kind(&self) -> Option<SolverKind> {
        match (&self.regularized, &self.discrete, &self.montecarlo) {
            (Some(_), None, None) => Some(SolverKind::Regularized),
            (None, Some(_), None) => Some(SolverKind::Discrete),
            (None, None, Some(_)) => Some(SolverKind::MonteCarlo),
            _ => None,
        }
    }

    pub fn horizon(&self) -> f64 {
        self.regularized
            .as_ref()
            .map(|r| r.horizon)
            .or(self.discrete.as_ref().map(|d| d.horizon))
            .or(self.montecarlo.as_ref().map(|m| m.horizon))
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MassConservationSpec {
    #[serde(default = "default_mass_tol")]
    pub tol: f64,
}

fn default_mass_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonotonicitySpec {
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub r: f64,
}

/// Truncation ladder: caps for the discrete solver, `1/eps` for the regularized one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnsetSpec {
    pub levels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GelInequalitySpec {
    #[serde(rename = "R")]
    pub r: Vec<f64>,
    #[serde(rename = "T", default = "zero_list")]
    pub t: Vec<f64>,
}

fn zero_list() -> Vec<f64> {
    vec![0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthSpec {
    pub k: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_prime: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizationConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_prime: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_min: Option<f64>,
}

impl LocalizationConfig {
    pub fn spec(&self, default_gamma_prime: f64) -> LocalizationSpec {
        let d = LocalizationSpec::default();
        LocalizationSpec {
            schedule: self.schedule.clone().unwrap_or(d.schedule),
            gamma_prime: self.gamma_prime.unwrap_or(default_gamma_prime),
            m0: None,
            t_min: self.t_min.unwrap_or(d.t_min),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mass_conservation: Option<MassConservationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moment_monotonicity: Option<MonotonicitySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gelation_onset: Option<OnsetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gel_inequality: Option<GelInequalitySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moment_growth: Option<GrowthSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub localization: Option<LocalizationConfig>,
}

impl DiagnosticsSpec {
    pub const NAMES: [&'static str; 6] = [
        "mass_conservation",
        "moment_monotonicity",
        "gelation_onset",
        "gel_inequality",
        "moment_growth",
        "localization",
    ];

    /// Keep only the named certificates.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        for n in names {
            if !Self::NAMES.contains(&n.as_str()) {
                return Err(CoagError::Config(format!("unknown certificate `{n}`")));
            }
        }
        let keep = |n: &str| names.iter().any(|m| m == n);
        Ok(Self {
            mass_conservation: self
                .mass_conservation
                .clone()
                .or(Some(MassConservationSpec { tol: default_mass_tol() }))
                .filter(|_| keep("mass_conservation")),
            moment_monotonicity: self
                .moment_monotonicity
                .clone()
                .or(Some(MonotonicitySpec { alphas: vec![0.0, 1.0], r: 0.0 }))
                .filter(|_| keep("moment_monotonicity")),
            gelation_onset: self.gelation_onset.clone().filter(|_| keep("gelation_onset")),
            gel_inequality: self
                .gel_inequality
                .clone()
                .or(Some(GelInequalitySpec { r: vec![4.0, 8.0, 16.0], t: vec![0.0] }))
                .filter(|_| keep("gel_inequality")),
            moment_growth: self
                .moment_growth
                .clone()
                .or(Some(GrowthSpec { k: 2.0, gamma_prime: None }))
                .filter(|_| keep("moment_growth")),
            localization: self
                .localization
                .clone()
                .or(Some(LocalizationConfig { schedule: None, gamma_prime: None, t_min: None }))
                .filter(|_| keep("localization")),
        })
    }

    pub fn gel_specs(&self, gel: GelParams) -> Vec<GelTestSpec> {
        let Some(g) = &self.gel_inequality else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for &t in &g.t {
            for &r in &g.r {
                out.push(GelTestSpec::new(gel, r, t));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kernel: KernelSpec,
    pub initial: InitialSpec,
    pub solver: SolverSpec,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

/// One field-level problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Issue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone)]
pub struct Parsed {
    pub config: RunConfig,
    pub warnings: Vec<Issue>,
}

fn issues_error(issues: &[Issue]) -> CoagError {
    CoagError::Config(issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))
}

/// Parse and validate. Errors list every problem as `path: message`.
pub fn parse_config(text: &str) -> Result<Parsed> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        issues_error(&[Issue {
            path,
            message: e.into_inner().to_string(),
        }])
    })?;
    let (errors, warnings) = check(&config);
    if !errors.is_empty() {
        return Err(issues_error(&errors));
    }
    Ok(Parsed { config, warnings })
}

pub fn load_config(path: &Path) -> Result<Parsed> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

fn times_ok(ts: &[f64], horizon: f64) -> bool {
    ts.iter().all(|t| *t >= 0.0 && *t <= horizon && t.is_finite())
}

/// Semantic checks. Returns `(errors, warnings)`.
pub fn check(c: &RunConfig) -> (Vec<Issue>, Vec<Issue>) {
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let mut err = |path: &str, msg: &str| {
        errors.push(Issue {
            path: path.into(),
            message: msg.into(),
        })
    };
    let kernel = match c.kernel.build() {
        Ok(k) => Some(k),
        Err(e) => {
            err("kernel", &e.to_string());
            None
        }
    };
    if let Err(e) = c.initial.build(Path::new(".")) {
        // files are resolved against the config location at run time
        if c.initial.file.is_none() {
            err("initial", &e.to_string());
        }
    }
    let s = &c.solver;
    if s.kind().is_none() {
        err("solver", "exactly one of `regularized`, `discrete`, `montecarlo` is required");
    }
    if let Some(r) = &s.regularized {
        if check_eps(r.eps).is_err() {
            err("solver.regularized.eps", "must lie in (0,1)");
        }
        if !positive(r.horizon) {
            err("solver.regularized.horizon", "must be positive and finite");
        } else if !times_ok(&r.output_times, r.horizon) {
            err("solver.regularized.output_times", "must lie in [0, horizon]");
        }
        if let Some(t) = r.picard_tol {
            if !positive(t) {
                err("solver.regularized.picard_tol", "must be positive");
            }
        }
        if let Some(WindowPolicy::Fixed(w)) = r.window {
            if !positive(w) {
                err("solver.regularized.window.fixed", "must be positive");
            }
        }
        if let Some(g) = &r.grid {
            if let Some(q) = g.q {
                if !(q > 1.0 && q.is_finite()) {
                    err("solver.regularized.grid.q", "must exceed 1");
                }
            }
            if g.angular == Some(0) {
                err("solver.regularized.grid.angular", "must be positive");
            }
        }
        if let Some(k) = &kernel {
            let e = k.envelope;
            if (e.gamma1 + e.lambda1 - 1.0).abs() < 1e-12 || (e.gamma2 + e.lambda2 - 1.0).abs() < 1e-12 {
                warnings.push(Issue {
                    path: "kernel.envelope".into(),
                    message: "gamma + lambda = 1: the existence theorem requires strict inequality; run proceeds".into(),
                });
            }
        }
    }
    if let Some(d) = &s.discrete {
        if d.cap == 0 {
            err("solver.discrete.cap", "must be positive");
        }
        if !positive(d.horizon) {
            err("solver.discrete.horizon", "must be positive and finite");
        } else if !times_ok(&d.record.times, d.horizon) {
            err("solver.discrete.record.times", "must lie in [0, horizon]");
        }
        if let Some(r) = d.rtol {
            if !positive(r) {
                err("solver.discrete.rtol", "must be positive");
            }
        }
        if matches!(d.record.every, Some(e) if !positive(e)) {
            err("solver.discrete.record.every", "must be positive");
        }
    }
    if let Some(m) = &s.montecarlo {
        if m.n < 2 {
            err("solver.montecarlo.N", "must be at least 2");
        }
        if m.replicas == 0 {
            err("solver.montecarlo.replicas", "must be positive");
        }
        if !positive(m.horizon) {
            err("solver.montecarlo.horizon", "must be positive and finite");
        } else if !times_ok(&m.record_times, m.horizon) {
            err("solver.montecarlo.record_times", "must lie in [0, horizon]");
        }
        if matches!(m.record_every, Some(e) if !positive(e)) {
            err("solver.montecarlo.record_every", "must be positive");
        }
    }
    if let Some(mc) = &c.diagnostics.mass_conservation {
        if !(mc.tol >= 0.0) {
            err("diagnostics.mass_conservation.tol", "must be nonnegative");
        }
    }
    if let Some(o) = &c.diagnostics.gelation_onset {
        if o.levels.len() < 2 || o.levels.iter().any(|l| !positive(*l)) {
            err("diagnostics.gelation_onset.levels", "need at least two positive levels");
        }
        if s.regularized.is_some() && o.levels.iter().any(|l| check_eps(1.0 / l).is_err()) {
            err("diagnostics.gelation_onset.levels", "levels are 1/eps and must exceed 1");
        }
    }
    if let Some(g) = &c.diagnostics.gel_inequality {
        if g.r.is_empty() || g.r.iter().any(|r| !positive(*r)) {
            err("diagnostics.gel_inequality.R", "need positive radii");
        }
        if g.t.iter().any(|t| !(*t >= 0.0)) {
            err("diagnostics.gel_inequality.T", "must be nonnegative");
        }
    }
    (errors, warnings)
}

/// Sorted, deduplicated union of explicit times and a uniform grid on `(0, horizon]`.
pub fn expand_schedule(s: &Schedule1d, horizon: f64) -> Vec<f64> {
    let mut out: Vec<f64> = s.times.clone();
    if let Some(dt) = s.every {
        let n = (horizon / dt + 1e-9).floor() as usize;
        out.extend((1..=n).map(|i| i as f64 * dt));
    }
    out.retain(|t| *t > 0.0 && *t <= horizon);
    out.sort_by(f64::total_cmp);
    out.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
    out
}

/// Replace the value at a dotted path, e.g. `solver.regularized.eps`.
pub fn set_path(doc: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            serde_json::Value::Object(map) => {
                if last {
                    map.insert(p.to_string(), value);
                    return Ok(());
                }
                map.entry(p.to_string()).or_insert_with(|| serde_json::Value::Object(Default::default()))
            }
            serde_json::Value::Array(items) => {
                let idx: usize = p
                    .parse()
                    .map_err(|_| CoagError::Config(format!("`{p}` is not an array index in {path}")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| CoagError::Config(format!("index {idx} out of range ({len}) in {path}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(CoagError::Config(format!("cannot descend into `{p}` in {path}"))),
        };
    }
    Err(CoagError::Config("empty parameter path".into()))
}
