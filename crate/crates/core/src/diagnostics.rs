//! Numerical certificates evaluated on trajectories.
//!
//! Each check is a pure function of its inputs and returns a [`Certificate`]
//! with a signed slack: nonnegative slack (up to the tolerance) means pass.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::discrete::{first_drop, DenseSeries};
use crate::kernels::{norm1, GelParams, Verdict};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Inapplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub name: String,
    pub verdict: Status,
    pub slack: f64,
    pub tolerance: f64,
    /// Parameter summary, e.g. `alpha=0.5 samples=41`.
    pub digest: String,
    pub reason: Option<String>,
    pub details: BTreeMap<String, f64>,
}

impl Certificate {
    fn new(name: &str, slack: f64, tolerance: f64, digest: String) -> Self {
        let verdict = if slack >= -tolerance { Status::Pass } else { Status::Fail };
        Self {
            name: name.to_string(),
            verdict,
            slack,
            tolerance,
            digest,
            reason: None,
            details: BTreeMap::new(),
        }
    }

    fn inapplicable(name: &str, tolerance: f64, reason: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            verdict: Status::Inapplicable,
            slack: 0.0,
            tolerance,
            digest: String::new(),
            reason: Some(reason.into()),
            details: BTreeMap::new(),
        }
    }

    fn fail(name: &str, tolerance: f64, digest: String, reason: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            verdict: Status::Fail,
            slack: f64::NEG_INFINITY,
            tolerance,
            digest,
            reason: Some(reason.into()),
            details: BTreeMap::new(),
        }
    }

    fn with(mut self, key: &str, v: f64) -> Self {
        self.details.insert(key.to_string(), v);
        self
    }

    pub fn passed(&self) -> bool {
        self.verdict != Status::Fail
    }
}

/// Relative mass-vector drift net of truncation flux. Pruned mass counts as drift.
pub fn mass_conservation(traj: &Trajectory, tol: f64) -> Certificate {
    const NAME: &str = "mass_conservation";
    match traj.meta.classification {
        Some(c) if c.verdict == Verdict::MassConservingGuaranteed => {}
        _ => return Certificate::inapplicable(NAME, tol, "kernel not classified mass-conserving"),
    }
    if traj.is_empty() {
        return Certificate::inapplicable(NAME, tol, "empty trajectory");
    }
    let m0 = traj.samples[0].mass_vector();
    let f0 = &traj.flux[0];
    let base: Vec<f64> = m0.iter().zip(f0).map(|(m, f)| m + f).collect();
    let scale = norm1(&base);
    if scale == 0.0 {
        return Certificate::inapplicable(NAME, tol, "zero initial mass");
    }
    let mut worst = 0.0f64;
    let mut flux_max = 0.0f64;
    for (s, fl) in traj.samples.iter().zip(&traj.flux) {
        let m = s.mass_vector();
        let drift: f64 = m.iter().zip(fl).zip(&base).map(|((m, f), b)| (m + f - b).abs()).sum();
        worst = worst.max(drift / scale);
        flux_max = flux_max.max(norm1(fl) / scale);
    }
    Certificate::new(NAME, tol - worst, tol, format!("samples={}", traj.len()))
        .with("max_drift", worst)
        .with("truncation_flux", flux_max)
}

/// Moment orders admissible for the monotonicity check.
pub fn monotonicity_window(traj: &Trajectory, r: f64) -> Option<(f64, f64)> {
    traj.meta
        .envelope
        .map(|e| ((-e.beta).min(-e.lambda1) - r, 1.0))
}

pub const MONOTONE_TOL: f64 = 1e-10;

/// `M_alpha` must not increase by more than `1e-10` relative per sample step.
pub fn moment_monotonicity(traj: &Trajectory, alpha: f64, r: f64) -> Certificate {
    let name = "moment_monotonicity";
    let Some((lo, hi)) = monotonicity_window(traj, r) else {
        return Certificate::inapplicable(name, MONOTONE_TOL, "no envelope recorded");
    };
    if !(alpha >= lo && alpha <= hi) {
        return Certificate::inapplicable(name, MONOTONE_TOL, format!("alpha={alpha} outside [{lo}, {hi}]"));
    }
    let series = traj.moment_series(alpha);
    let mut worst = 0.0f64;
    for w in series.windows(2) {
        if w[0] > 0.0 {
            worst = worst.max((w[1] - w[0]) / w[0]);
        } else if w[1] > 0.0 {
            worst = f64::INFINITY;
        }
    }
    Certificate::new(name, -worst, MONOTONE_TOL, format!("alpha={alpha} r={r} samples={}", series.len()))
        .with("max_relative_increase", worst)
}

/// Mass series of one truncation level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GelLevel {
    /// Truncation level (size cap or `1/eps`).
    pub level: f64,
    pub times: Vec<f64>,
    pub mass: Vec<f64>,
}

impl GelLevel {
    pub fn from_dense(level: f64, dense: &DenseSeries) -> Self {
        Self {
            level,
            times: dense.t.clone(),
            mass: dense.m1.clone(),
        }
    }

    pub fn from_trajectory(level: f64, traj: &Trajectory) -> Self {
        Self {
            level,
            times: traj.times(),
            mass: traj.moment_series(1.0),
        }
    }

    pub fn onset(&self, fraction: f64) -> Option<f64> {
        first_drop(&self.times, &self.mass, fraction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GelOnset {
    pub levels: Vec<f64>,
    pub onsets: Vec<Option<f64>>,
    pub estimate: Option<f64>,
    pub certificate: Certificate,
}

pub const ONSET_FRACTION: f64 = 0.01;
pub const ONSET_TOL: f64 = 0.1;

/// Limit of a sequence of onsets over increasing levels: Aitken's delta-squared
/// on the last three when the differences shrink, otherwise linear in `1/level`
/// through the last two.
pub fn extrapolate_onset(levels: &[f64], onsets: &[f64]) -> Option<f64> {
    let n = onsets.len();
    if n < 2 {
        return None;
    }
    if n >= 3 {
        let (a, b, c) = (onsets[n - 3], onsets[n - 2], onsets[n - 1]);
        let (d1, d2) = (b - a, c - b);
        if d1 != 0.0 && (d2 / d1) > 0.0 && (d2 / d1) < 1.0 {
            return Some(c - d2 * d2 / (d2 - d1));
        }
    }
    let (l1, l2) = (1.0 / levels[n - 2], 1.0 / levels[n - 1]);
    let (o1, o2) = (onsets[n - 2], onsets[n - 1]);
    if l1 == l2 {
        return Some(o2);
    }
    Some(o2 - (o2 - o1) * l2 / (l2 - l1))
}

/// Gel onset per level (first 1% drop of the first moment) and its extrapolation.
pub fn gelation_onset(levels: &[GelLevel]) -> GelOnset {
    let name = "gelation_onset";
    let mut sorted: Vec<&GelLevel> = levels.iter().collect();
    sorted.sort_by(|a, b| a.level.total_cmp(&b.level));
    let lv: Vec<f64> = sorted.iter().map(|l| l.level).collect();
    let onsets: Vec<Option<f64>> = sorted.iter().map(|l| l.onset(ONSET_FRACTION)).collect();
    let horizon = sorted
        .iter()
        .filter_map(|l| l.times.last().cloned())
        .fold(0.0, f64::max);
    let digest = format!("levels={lv:?} horizon={horizon}");
    if levels.len() < 2 {
        let cert = Certificate::inapplicable(name, ONSET_TOL, "need at least two truncation levels");
        return GelOnset { levels: lv, onsets, estimate: None, certificate: cert };
    }
    let observed: Vec<(f64, f64)> = lv.iter().zip(&onsets).filter_map(|(l, o)| o.map(|o| (*l, o))).collect();
    if observed.len() < 2 {
        let cert = Certificate::fail(name, ONSET_TOL, digest, "no-gel-observed").with("horizon", horizon);
        return GelOnset { levels: lv, onsets, estimate: None, certificate: cert };
    }
    let (ls, os): (Vec<f64>, Vec<f64>) = observed.into_iter().unzip();
    let estimate = extrapolate_onset(&ls, &os);
    let n = os.len();
    let movement = (os[n - 1] - os[n - 2]).abs() / os[n - 1].abs();
    let finite = estimate.is_some_and(f64::is_finite);
    let slack = if finite { ONSET_TOL - movement } else { f64::NEG_INFINITY };
    let mut cert = Certificate::new(name, slack, 0.0, digest).with("movement", movement);
    if let Some(e) = estimate {
        cert = cert.with("estimate", e);
    }
    GelOnset {
        levels: lv,
        onsets,
        estimate,
        certificate: cert,
    }
}

/// Test function shape for the gel inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PhiShape {
    /// `max(0, A^{1 - g/2} - (R/2)^{1 - g/2})`.
    ShiftedPower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GelTestSpec {
    pub phi: PhiShape,
    pub r: f64,
    pub t_start: f64,
    pub gel: GelParams,
}

impl GelTestSpec {
    pub fn new(gel: GelParams, r: f64, t_start: f64) -> Self {
        Self {
            phi: PhiShape::ShiftedPower,
            r,
            t_start,
            gel,
        }
    }

    pub fn phi_prime(&self, a: f64) -> f64 {
        let g = self.gel.gamma_gel;
        match self.phi {
            PhiShape::ShiftedPower => {
                if a >= self.r / 2.0 {
                    (1.0 - g / 2.0) * a.powf(-g / 2.0)
                } else {
                    0.0
                }
            }
        }
    }

    /// Closed-form `C_phi = int_0^inf phi'(A) A^{-1/2} dA`.
    pub fn c_phi(&self) -> f64 {
        c_phi_closed(self.gel.gamma_gel, self.r)
    }

    pub fn c_gamma(&self) -> f64 {
        c_gamma(self.gel.c1, self.gel.gamma_gel)
    }
}

pub fn c_phi_closed(gamma: f64, r: f64) -> f64 {
    (2.0 - gamma) / (gamma - 1.0) * (r / 2.0).powf((1.0 - gamma) / 2.0)
}

/// `C_gamma = (2/c1) (1 - 2^{g/2-1})^{-2} ((2-g)/(g-1))^2 2^{g-1}`.
pub fn c_gamma(c1: f64, gamma: f64) -> f64 {
    (2.0 / c1) * (1.0 - 2f64.powf(gamma / 2.0 - 1.0)).powi(-2) * ((2.0 - gamma) / (gamma - 1.0)).powi(2)
        * 2f64.powf(gamma - 1.0)
}

/// `int_{a0}^inf f(A) A^{-1/2} dA` by composite Simpson in `u = ln(A/a0)`,
/// extending the range until a panel contributes below `1e-16` of the total.
pub fn tail_integral<F: Fn(f64) -> f64>(f: F, a0: f64) -> f64 {
    let g = |u: f64| {
        let a = a0 * u.exp();
        f(a) * a.sqrt()
    };
    let h = 0.02;
    let panel = |u0: f64| -> f64 {
        let m = 50;
        let mut s = g(u0) + g(u0 + m as f64 * h);
        for k in 1..m {
            s += g(u0 + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let mut total = 0.0;
    let mut u = 0.0;
    loop {
        let p = panel(u);
        total += p;
        u += 50.0 * h;
        if p.abs() <= 1e-17 * total.abs() || u > 1e5 {
            return total;
        }
    }
}

/// `int_0^inf phi'(A) A^{-1/2} dA` by quadrature.
pub fn c_phi_quadrature(spec: &GelTestSpec) -> f64 {
    tail_integral(|a| spec.phi_prime(a), spec.r / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GelInequality {
    pub lhs: f64,
    pub rhs: f64,
    pub certificate: Certificate,
}

/// `int_T^H (int_{|x|>=R} |x| f)^2 dt <= C_gamma R^{1-g} M1(T)`, trapezoid in time.
pub fn gel_inequality(traj: &Trajectory, spec: &GelTestSpec, horizon: f64) -> GelInequality {
    let name = "gel_inequality";
    let g = spec.gel.gamma_gel;
    if !(g > 1.0 && g < 2.0) {
        let c = Certificate::inapplicable(name, 0.0, format!("gamma_gel={g} outside (1,2)"));
        return GelInequality { lhs: 0.0, rhs: 0.0, certificate: c };
    }
    if !horizon.is_finite() || traj.is_empty() {
        let c = Certificate::inapplicable(name, 0.0, "empty trajectory or infinite horizon");
        return GelInequality { lhs: 0.0, rhs: 0.0, certificate: c };
    }
    let pts: Vec<(f64, f64)> = traj
        .samples
        .iter()
        .filter(|s| s.time >= spec.t_start && s.time <= horizon)
        .map(|s| {
            let tail: f64 = s.particles.iter().filter(|p| p.norm() >= spec.r).map(|p| p.w * p.norm()).sum();
            (s.time, tail * tail)
        })
        .collect();
    let lhs: f64 = pts.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1)).sum();
    let m1_t = traj
        .samples
        .iter()
        .find(|s| s.time >= spec.t_start)
        .map_or(0.0, |s| s.moment(1.0));
    let rhs = spec.c_gamma() * spec.r.powf(1.0 - g) * m1_t;
    let digest = format!("R={} T={} horizon={horizon} samples={}", spec.r, spec.t_start, pts.len());
    let cert = Certificate::new(name, rhs - lhs, 0.0, digest)
        .with("lhs", lhs)
        .with("rhs", rhs)
        .with("c_gamma", spec.c_gamma());
    GelInequality { lhs, rhs, certificate: cert }
}

/// Boundedness of `M_k(t) / t^{(k-1)/(1-g')}` for `t >= 1`: the last quarter
/// may not exceed the earlier maximum by more than 10%.
pub fn moment_growth(traj: &Trajectory, k: f64, gamma_prime: f64) -> Certificate {
    let name = "moment_growth";
    let tol = 0.1;
    if !(k > 1.0) || !(0.0..1.0).contains(&gamma_prime) {
        return Certificate::inapplicable(name, tol, "need k > 1 and gamma' in [0,1)");
    }
    if traj.meta.homogeneity.is_none() {
        return Certificate::inapplicable(name, tol, "kernel not flagged homogeneous");
    }
    if traj.horizon() < 1.0 {
        return Certificate::inapplicable(name, tol, "horizon < 1");
    }
    let p = (k - 1.0) / (1.0 - gamma_prime);
    let ratios: Vec<f64> = traj
        .samples
        .iter()
        .filter(|s| s.time >= 1.0)
        .map(|s| s.moment(k) / s.time.powf(p))
        .collect();
    if ratios.len() < 4 {
        return Certificate::inapplicable(name, tol, "fewer than four samples with t >= 1");
    }
    let split = ratios.len() - ratios.len() / 4;
    let early = ratios[..split].iter().cloned().fold(0.0, f64::max);
    let late = ratios[split..].iter().cloned().fold(0.0, f64::max);
    let c0 = early.max(late);
    let slack = if early > 0.0 { (1.0 + tol) - late / early } else { f64::NEG_INFINITY };
    Certificate::new(name, slack, 0.0, format!("k={k} gamma'={gamma_prime} samples={}", ratios.len()))
        .with("c0", c0)
        .with("late_over_early", late / early)
}

/// Cone opening and radial window schedule `a(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// `min(1, t^{-p})`.
    Power { p: f64 },
    /// Linear interpolation in a table of `(t, a)`, clamped at the ends.
    Table { points: Vec<(f64, f64)> },
}

impl Schedule {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Schedule::Power { p } => {
                if t <= 1.0 {
                    1.0
                } else {
                    t.powf(-p)
                }
            }
            Schedule::Table { points } => {
                let k = points.partition_point(|(x, _)| *x <= t);
                if k == 0 {
                    points[0].1
                } else if k == points.len() {
                    points[k - 1].1
                } else {
                    let ((t0, a0), (t1, a1)) = (points[k - 1], points[k]);
                    a0 + (a1 - a0) * (t - t0) / (t1 - t0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSpec {
    pub schedule: Schedule,
    pub gamma_prime: f64,
    /// Initial mass vector; taken from the first sample when absent.
    pub m0: Option<Vec<f64>>,
    /// Samples before this time are reported but not judged.
    pub t_min: f64,
}

impl Default for LocalizationSpec {
    fn default() -> Self {
        Self {
            schedule: Schedule::Power { p: 0.25 },
            gamma_prime: 0.0,
            m0: None,
            t_min: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub series: Vec<(f64, f64)>,
    pub certificate: Certificate,
}

/// Deficit of mass near the ray of the initial mass vector:
/// `D(t) = | int_{A_t, cone} |x| f(dx, t) - |m0| |`.
pub fn localization_deficit(traj: &Trajectory, spec: &LocalizationSpec) -> Vec<(f64, f64)> {
    let m0 = spec.m0.clone().unwrap_or_else(|| traj.samples[0].mass_vector());
    let norm_m0 = norm1(&m0);
    let dir: Vec<f64> = m0.iter().map(|v| v / norm_m0).collect();
    let expo = 1.0 / (1.0 - spec.gamma_prime);
    traj.samples
        .iter()
        .map(|s| {
            let t = s.time;
            let a = spec.schedule.eval(t);
            let scale = t.powf(expo);
            let (lo, hi) = (a * scale, scale / a);
            let inside: f64 = s
                .particles
                .iter()
                .filter(|p| {
                    let r = p.norm();
                    r >= lo && r <= hi && {
                        let off: f64 = p.x.iter().zip(&dir).map(|(x, d)| (x / r - d).abs()).sum();
                        off <= a
                    }
                })
                .map(|p| p.w * p.norm())
                .sum();
            (t, (inside - norm_m0).abs())
        })
        .collect()
}

pub const LOCALIZATION_BAND: f64 = 0.05;

/// Passes when the deficit over the last third of the judged samples moves
/// down, allowing upticks of 5% of that segment's largest value.
pub fn localization_report(traj: &Trajectory, spec: &LocalizationSpec) -> LocalizationReport {
    let name = "localization";
    if traj.dim < 2 {
        let c = Certificate::inapplicable(name, LOCALIZATION_BAND, "dimension 1");
        return LocalizationReport { series: vec![], certificate: c };
    }
    if traj.is_empty() {
        let c = Certificate::inapplicable(name, LOCALIZATION_BAND, "empty trajectory");
        return LocalizationReport { series: vec![], certificate: c };
    }
    let m0 = spec.m0.clone().unwrap_or_else(|| traj.samples[0].mass_vector());
    if norm1(&m0) == 0.0 {
        let c = Certificate::inapplicable(name, LOCALIZATION_BAND, "zero initial mass");
        return LocalizationReport { series: vec![], certificate: c };
    }
    let series = localization_deficit(traj, spec);
    let judged: Vec<f64> = series.iter().filter(|(t, _)| *t >= spec.t_min).map(|(_, d)| *d).collect();
    if judged.len() < 3 {
        let c = Certificate::inapplicable(name, LOCALIZATION_BAND, "fewer than three judged samples");
        return LocalizationReport { series, certificate: c };
    }
    let tail = &judged[judged.len() - judged.len().div_ceil(3)..];
    let peak = tail.iter().cloned().fold(0.0, f64::max);
    let band = LOCALIZATION_BAND * peak;
    let mut slack = f64::INFINITY;
    for w in tail.windows(2) {
        slack = slack.min(band - (w[1] - w[0]));
    }
    // net movement over the segment must be downward
    slack = slack.min(tail[0] - tail[tail.len() - 1]);
    let digest = format!("schedule={:?} gamma'={} judged={}", spec.schedule, spec.gamma_prime, judged.len());
    let cert = Certificate::new(name, slack, 0.0, digest)
        .with("first", tail[0])
        .with("last", tail[tail.len() - 1]);
    LocalizationReport { series, certificate: cert }
}
