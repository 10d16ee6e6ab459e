//! Coagulation kernels and the quantities derived from their power-law envelope.
//!
//! Every kernel carries an [`EnvelopeParams`] describing the three-regime upper
//! bound
//!
//! ```text
//!             | |x|^-b |y|^-b                 |x|,|y| <= 1
//! K(x,y) <= c2| |x|^(g1+l1) |y|^-l1           |x| >= 1 >= |y|      (|y| <= |x|)
//!             | |x|^(g2+l2) |y|^-l2           |x|,|y| >= 1
//! ```
//!
//! and optionally a gelling lower bound ([`GelParams`]) and a homogeneity class
//! ([`Homogeneity`]). Norms are always the l1 norm of the composition vector.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoagError, Result};

const EXPONENT_TOL: f64 = 1e-12;

/// l1 norm of a composition vector.
#[inline]
pub fn norm1(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

fn check_composition(x: &[f64]) -> Result<f64> {
    if x.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CoagError::Domain(format!(
            "composition {x:?} must have finite nonnegative entries"
        )));
    }
    let n = norm1(x);
    if n <= 0.0 {
        return Err(CoagError::Domain("zero composition vector".into()));
    }
    Ok(n)
}

/// Parameters of the three-regime power-law upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeParams {
    pub beta: f64,
    pub gamma1: f64,
    pub lambda1: f64,
    pub gamma2: f64,
    pub lambda2: f64,
    pub c2: f64,
}

impl EnvelopeParams {
    pub fn new(beta: f64, gamma1: f64, lambda1: f64, gamma2: f64, lambda2: f64, c2: f64) -> Result<Self> {
        let env = Self {
            beta,
            gamma1,
            lambda1,
            gamma2,
            lambda2,
            c2,
        };
        env.validate()?;
        Ok(env)
    }

    /// Same exponents in both large regimes.
    pub fn uniform(beta: f64, gamma: f64, lambda: f64, c2: f64) -> Result<Self> {
        Self::new(beta, gamma, lambda, gamma, lambda, c2)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.beta, self.gamma1, self.lambda1, self.gamma2, self.lambda2, self.c2];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(CoagError::Parameter("envelope parameters must be finite".into()));
        }
        if self.c2 < 0.0 {
            return Err(CoagError::Parameter("envelope prefactor c2 must be nonnegative".into()));
        }
        for (j, (g, l)) in [(self.gamma1, self.lambda1), (self.gamma2, self.lambda2)]
            .into_iter()
            .enumerate()
        {
            if -l > g + l + EXPONENT_TOL {
                return Err(CoagError::Parameter(format!(
                    "envelope requires -lambda{0} <= gamma{0} + lambda{0} (got lambda = {l}, gamma = {g})",
                    j + 1
                )));
            }
            if g + l > 1.0 + EXPONENT_TOL {
                return Err(CoagError::Parameter(format!(
                    "envelope requires gamma{0} + lambda{0} <= 1 (got {1})",
                    j + 1,
                    g + l
                )));
            }
        }
        Ok(())
    }

    /// True when `gamma_j + lambda_j < 1` for both large regimes.
    pub fn strict(&self) -> bool {
        self.gamma1 + self.lambda1 < 1.0 && self.gamma2 + self.lambda2 < 1.0
    }

    pub fn weight_fn(&self) -> WeightFn {
        WeightFn::from_envelope(self)
    }
}

/// Gelling lower bound `c1 (|x|^(g+l)|y|^-l + |y|^(g+l)|x|^-l) <= K(x,y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GelParams {
    pub c1: f64,
    pub gamma_gel: f64,
    pub lambda_gel: f64,
}

impl GelParams {
    pub fn new(c1: f64, gamma_gel: f64, lambda_gel: f64) -> Result<Self> {
        let g = Self {
            c1,
            gamma_gel,
            lambda_gel,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c1.is_finite()) {
            return Err(CoagError::Parameter("gel lower bound requires c1 > 0".into()));
        }
        if -self.lambda_gel > self.gamma_gel + self.lambda_gel + EXPONENT_TOL {
            return Err(CoagError::Parameter(
                "gel lower bound requires -lambda_gel <= gamma_gel + lambda_gel".into(),
            ));
        }
        Ok(())
    }

    /// Whether the gelation theorem applies (`gamma_gel` in (1, 2)).
    pub fn in_theorem_range(&self) -> bool {
        self.gamma_gel > 1.0 && self.gamma_gel < 2.0
    }

    pub fn lower_bound(&self, nx: f64, ny: f64) -> f64 {
        let (g, l) = (self.gamma_gel, self.lambda_gel);
        self.c1 * (nx.powf(g + l) * ny.powf(-l) + ny.powf(g + l) * nx.powf(-l))
    }
}

/// Two-sided homogeneous power-law class used by the localization statements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Homogeneity {
    /// Homogeneity degree gamma'.
    pub gamma: f64,
    pub lambda: f64,
    pub c1: f64,
    pub c2: f64,
    /// `K(rx, ry) = r^gamma K(x, y)` holds exactly.
    pub exact: bool,
}

/// Continuous weight `|x|^exp_small` for `|x| <= 1` and `|x|^exp_large` above.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightFn {
    pub exp_small: f64,
    pub exp_large: f64,
}

impl WeightFn {
    pub fn from_envelope(env: &EnvelopeParams) -> Self {
        Self {
            exp_small: (-env.beta).min(-env.lambda1),
            exp_large: (env.gamma1 + env.lambda1).max(env.gamma2 + env.lambda2),
        }
    }

    #[inline]
    pub fn at_norm(&self, r: f64) -> f64 {
        if r <= 1.0 {
            r.powf(self.exp_small)
        } else {
            r.powf(self.exp_large)
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        Ok(self.at_norm(check_composition(x)?))
    }
}

/// Free function form of [`WeightFn::eval`].
pub fn weight(w: &WeightFn, x: &[f64]) -> Result<f64> {
    w.eval(x)
}

/// Regime of the envelope a pair falls into (after ordering `|y| <= |x|`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    SmallSmall,
    LargeSmall,
    LargeLarge,
}

impl Regime {
    pub fn of(nx: f64, ny: f64) -> Self {
        let (big, small) = if ny <= nx { (nx, ny) } else { (ny, nx) };
        if big <= 1.0 {
            Regime::SmallSmall
        } else if small <= 1.0 {
            Regime::LargeSmall
        } else {
            Regime::LargeLarge
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Regime::SmallSmall => "small-small",
            Regime::LargeSmall => "large-small",
            Regime::LargeLarge => "large-large",
        }
    }
}

/// Envelope evaluated from norms.
#[inline]
pub fn envelope_at_norms(env: &EnvelopeParams, nx: f64, ny: f64) -> f64 {
    let (big, small) = if ny <= nx { (nx, ny) } else { (ny, nx) };
    match Regime::of(big, small) {
        Regime::SmallSmall => env.c2 * big.powf(-env.beta) * small.powf(-env.beta),
        Regime::LargeSmall => env.c2 * big.powf(env.gamma1 + env.lambda1) * small.powf(-env.lambda1),
        Regime::LargeLarge => env.c2 * big.powf(env.gamma2 + env.lambda2) * small.powf(-env.lambda2),
    }
}

/// Right-hand side of the envelope bound for the pair `(x, y)`.
pub fn envelope_value(env: &EnvelopeParams, x: &[f64], y: &[f64]) -> Result<f64> {
    let nx = check_composition(x)?;
    let ny = check_composition(y)?;
    Ok(envelope_at_norms(env, nx, ny))
}

/// Piecewise-linear cutoff: 1 up to `1/eps`, 0 from `2/eps`.
#[inline]
pub fn zeta_norm(eps: f64, r: f64) -> f64 {
    let lo = 1.0 / eps;
    let hi = 2.0 / eps;
    if r <= lo {
        1.0
    } else if r >= hi {
        0.0
    } else {
        (hi - r) / (hi - lo)
    }
}

pub fn zeta(eps: f64, x: &[f64]) -> Result<f64> {
    check_eps(eps)?;
    Ok(zeta_norm(eps, norm1(x)))
}

pub(crate) fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps < 1.0 {
        Ok(())
    } else {
        Err(CoagError::Parameter(format!(
            "regularization parameter eps must lie in (0,1), got {eps}"
        )))
    }
}

pub type RateFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Functional form of a kernel.
#[derive(Clone)]
pub enum KernelKind {
    /// `c0`
    Constant,
    /// `c0 (|x| + |y|)`
    Additive,
    /// `c0 |x||y|`
    Multiplicative,
    /// `c0 x^T A y` with `A` symmetric and nonnegative.
    Product { matrix: Vec<Vec<f64>> },
    /// `c0 (|x|^-l |y|^(g+l) + |y|^-l |x|^(g+l))`
    PowerLaw { lambda: f64, gamma: f64 },
    /// `c0 (|x|^-1/3 + |y|^-1/3)(|x|^1/3 + |y|^1/3)`
    Diffusion,
    /// `c0 (|x|^-1 + |y|^-1)^1/2 (|x|^1/3 + |y|^1/3)^2`
    Ballistic,
    /// Ballistic (rescaled by `1/sqrt 2` so both regimes agree at `|x| = |y| = 1`)
    /// when both norms are at most 1, diffusion when both are at least 1, and a
    /// geometric blend in between with weight `ln|x| / (ln|x| - ln|y|)` on the
    /// diffusion factor.
    Transition,
    Custom(RateFn),
}

impl fmt::Debug for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelKind::Constant => write!(f, "Constant"),
            KernelKind::Additive => write!(f, "Additive"),
            KernelKind::Multiplicative => write!(f, "Multiplicative"),
            KernelKind::Product { matrix } => write!(f, "Product({matrix:?})"),
            KernelKind::PowerLaw { lambda, gamma } => write!(f, "PowerLaw(lambda={lambda}, gamma={gamma})"),
            KernelKind::Diffusion => write!(f, "Diffusion"),
            KernelKind::Ballistic => write!(f, "Ballistic"),
            KernelKind::Transition => write!(f, "Transition"),
            KernelKind::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// A coagulation kernel with its envelope metadata. Immutable once built.
#[derive(Debug, Clone)]
pub struct Kernel {
    pub name: String,
    pub c0: f64,
    pub kind: KernelKind,
    pub envelope: EnvelopeParams,
    pub gel: Option<GelParams>,
    pub homogeneity: Option<Homogeneity>,
}

#[inline]
fn diffusion_norms(nx: f64, ny: f64) -> f64 {
    (nx.powf(-1.0 / 3.0) + ny.powf(-1.0 / 3.0)) * (nx.cbrt() + ny.cbrt())
}

#[inline]
fn ballistic_norms(nx: f64, ny: f64) -> f64 {
    let s = nx.cbrt() + ny.cbrt();
    (1.0 / nx + 1.0 / ny).sqrt() * s * s
}

#[inline]
fn transition_norms(nx: f64, ny: f64) -> f64 {
    let (big, small) = if ny <= nx { (nx, ny) } else { (ny, nx) };
    let bal = || ballistic_norms(big, small) * std::f64::consts::FRAC_1_SQRT_2;
    if big <= 1.0 {
        bal()
    } else if small >= 1.0 {
        diffusion_norms(big, small)
    } else {
        let lb = big.ln();
        let theta = lb / (lb - small.ln());
        bal().powf(1.0 - theta) * diffusion_norms(big, small).powf(theta)
    }
}

fn bilinear(matrix: &[Vec<f64>], x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for (row, xi) in matrix.iter().zip(x) {
        if *xi == 0.0 {
            continue;
        }
        for (a, yj) in row.iter().zip(y) {
            s += xi * a * yj;
        }
    }
    s
}

impl Kernel {
    fn builtin(name: &str, c0: f64, kind: KernelKind, envelope: EnvelopeParams) -> Self {
        Self {
            name: name.to_string(),
            c0,
            kind,
            envelope,
            gel: None,
            homogeneity: None,
        }
    }

    pub fn constant(c0: f64) -> Self {
        let env = EnvelopeParams::uniform(0.0, 0.0, 0.0, c0).expect("valid constant envelope");
        let mut k = Self::builtin("constant", c0, KernelKind::Constant, env);
        k.homogeneity = Some(Homogeneity {
            gamma: 0.0,
            lambda: 0.0,
            c1: 0.5 * c0,
            c2: 0.5 * c0,
            exact: true,
        });
        k
    }

    pub fn additive(c0: f64) -> Self {
        let env = EnvelopeParams::uniform(0.0, 1.0, 0.0, 2.0 * c0).expect("valid additive envelope");
        let mut k = Self::builtin("additive", c0, KernelKind::Additive, env);
        k.homogeneity = Some(Homogeneity {
            gamma: 1.0,
            lambda: 0.0,
            c1: c0,
            c2: c0,
            exact: true,
        });
        k
    }

    pub fn multiplicative(c0: f64) -> Self {
        let env = EnvelopeParams::uniform(-1.0, 2.0, -1.0, c0).expect("valid multiplicative envelope");
        let mut k = Self::builtin("multiplicative", c0, KernelKind::Multiplicative, env);
        k.gel = Some(GelParams {
            c1: 0.5 * c0,
            gamma_gel: 2.0,
            lambda_gel: -1.0,
        });
        k.homogeneity = Some(Homogeneity {
            gamma: 2.0,
            lambda: -1.0,
            c1: 0.5 * c0,
            c2: 0.5 * c0,
            exact: true,
        });
        k
    }

    /// `x^T A y`. `A` must be square, symmetric and nonnegative.
    pub fn product(matrix: Vec<Vec<f64>>) -> Result<Self> {
        let d = matrix.len();
        if d == 0 || matrix.iter().any(|row| row.len() != d) {
            return Err(CoagError::Parameter("product kernel matrix must be square and nonempty".into()));
        }
        for i in 0..d {
            for j in 0..d {
                let a = matrix[i][j];
                if !(a >= 0.0 && a.is_finite()) {
                    return Err(CoagError::Parameter("product kernel matrix must be nonnegative".into()));
                }
                if a != matrix[j][i] {
                    return Err(CoagError::Parameter("product kernel matrix must be symmetric".into()));
                }
            }
        }
        let amax = matrix.iter().flatten().cloned().fold(0.0, f64::max);
        let amin = matrix.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
        let env = EnvelopeParams::uniform(-1.0, 2.0, -1.0, amax)?;
        let mut k = Self::builtin("product", 1.0, KernelKind::Product { matrix }, env);
        if amin > 0.0 {
            k.gel = Some(GelParams {
                c1: 0.5 * amin,
                gamma_gel: 2.0,
                lambda_gel: -1.0,
            });
        }
        k.homogeneity = Some(Homogeneity {
            gamma: 2.0,
            lambda: -1.0,
            c1: 0.5 * amin,
            c2: 0.5 * amax,
            exact: true,
        });
        Ok(k)
    }

    /// `c0 (|x|^-lambda |y|^(gamma+lambda) + |y|^-lambda |x|^(gamma+lambda))`.
    pub fn power_law(c0: f64, lambda: f64, gamma: f64) -> Result<Self> {
        if -lambda > gamma + lambda + EXPONENT_TOL {
            return Err(CoagError::Parameter(
                "power-law kernel requires -lambda <= gamma + lambda".into(),
            ));
        }
        let env = EnvelopeParams::uniform(lambda, gamma, lambda, 2.0 * c0)?;
        let mut k = Self::builtin("power-law", c0, KernelKind::PowerLaw { lambda, gamma }, env);
        if gamma > 1.0 {
            k.gel = Some(GelParams {
                c1: c0,
                gamma_gel: gamma,
                lambda_gel: lambda,
            });
        }
        k.homogeneity = Some(Homogeneity {
            gamma,
            lambda,
            c1: c0,
            c2: c0,
            exact: true,
        });
        Ok(k)
    }

    pub fn diffusion(c0: f64) -> Self {
        let t = 1.0 / 3.0;
        let env = EnvelopeParams::uniform(t, 0.0, t, 4.0 * c0).expect("valid diffusion envelope");
        let mut k = Self::builtin("diffusion", c0, KernelKind::Diffusion, env);
        k.homogeneity = Some(Homogeneity {
            gamma: 0.0,
            lambda: t,
            c1: c0,
            c2: 2.0 * c0,
            exact: true,
        });
        k
    }

    pub fn ballistic(c0: f64) -> Self {
        let env = EnvelopeParams::uniform(0.5, 1.0 / 6.0, 0.5, 4.0 * std::f64::consts::SQRT_2 * c0)
            .expect("valid ballistic envelope");
        let mut k = Self::builtin("ballistic", c0, KernelKind::Ballistic, env);
        k.homogeneity = Some(Homogeneity {
            gamma: 1.0 / 6.0,
            lambda: 0.5,
            c1: 0.5 * c0,
            c2: 4.0 * std::f64::consts::SQRT_2 * c0,
            exact: true,
        });
        k
    }

    pub fn transition(c0: f64) -> Self {
        let env = EnvelopeParams::new(0.5, 1.0 / 6.0, 0.5, 0.0, 1.0 / 3.0, 4.0 * c0)
            .expect("valid transition envelope");
        Self::builtin("transition", c0, KernelKind::Transition, env)
    }

    pub fn custom(name: &str, envelope: EnvelopeParams, rate: RateFn) -> Result<Self> {
        envelope.validate()?;
        Ok(Self::builtin(name, 1.0, KernelKind::Custom(rate), envelope))
    }

    pub fn with_envelope(mut self, envelope: EnvelopeParams) -> Result<Self> {
        envelope.validate()?;
        self.envelope = envelope;
        Ok(self)
    }

    pub fn with_gel(mut self, gel: Option<GelParams>) -> Result<Self> {
        if let Some(g) = &gel {
            g.validate()?;
        }
        self.gel = gel;
        Ok(self)
    }

    pub fn weight_fn(&self) -> WeightFn {
        self.envelope.weight_fn()
    }

    /// True when the rate depends on the compositions only through their norms.
    pub fn depends_on_norms_only(&self) -> bool {
        !matches!(self.kind, KernelKind::Product { .. } | KernelKind::Custom(_))
    }

    /// Rate for kernels that depend only on norms. Panics for the others.
    #[inline]
    pub fn rate_norms(&self, nx: f64, ny: f64) -> f64 {
        let c0 = self.c0;
        match &self.kind {
            KernelKind::Constant => c0,
            KernelKind::Additive => c0 * (nx + ny),
            KernelKind::Multiplicative => c0 * nx * ny,
            KernelKind::PowerLaw { lambda, gamma } => {
                let p = gamma + lambda;
                c0 * (nx.powf(-lambda) * ny.powf(p) + ny.powf(-lambda) * nx.powf(p))
            }
            KernelKind::Diffusion => c0 * diffusion_norms(nx, ny),
            KernelKind::Ballistic => c0 * ballistic_norms(nx, ny),
            KernelKind::Transition => c0 * transition_norms(nx, ny),
            KernelKind::Product { .. } | KernelKind::Custom(_) => {
                panic!("kernel {} depends on the full composition", self.name)
            }
        }
    }

    /// Unchecked rate; callers guarantee nonzero compositions.
    #[inline]
    pub fn rate(&self, x: &[f64], y: &[f64]) -> f64 {
        match &self.kind {
            // Summing both orders makes the result bit-symmetric.
            KernelKind::Product { matrix } => 0.5 * self.c0 * (bilinear(matrix, x, y) + bilinear(matrix, y, x)),
            KernelKind::Custom(f) => f(x, y),
            _ => self.rate_norms(norm1(x), norm1(y)),
        }
    }

    /// Rate with domain checks.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_composition(x)?;
        check_composition(y)?;
        if let KernelKind::Product { matrix } = &self.kind {
            if x.len() != matrix.len() || y.len() != matrix.len() {
                return Err(CoagError::Domain(format!(
                    "product kernel has dimension {}, got vectors of length {} and {}",
                    matrix.len(),
                    x.len(),
                    y.len()
                )));
            }
        }
        Ok(self.rate(x, y))
    }
}

/// Free function form of [`Kernel::eval`].
pub fn eval_kernel(kernel: &Kernel, x: &[f64], y: &[f64]) -> Result<f64> {
    kernel.eval(x, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    MassConservingGuaranteed,
    GellingGuaranteed,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub verdict: Verdict,
    /// Both large-regime sums `gamma_j + lambda_j` are strictly below 1.
    pub existence: bool,
}

/// Classify a kernel strictly by theorem hypotheses.
pub fn classify(kernel: &Kernel) -> Classification {
    let env = &kernel.envelope;
    let conserving = env.gamma2 <= 1.0;
    let gelling = kernel.gel.map(|g| g.in_theorem_range()).unwrap_or(false);
    let verdict = match (conserving, gelling) {
        (true, false) => Verdict::MassConservingGuaranteed,
        (false, true) => Verdict::GellingGuaranteed,
        _ => Verdict::Indeterminate,
    };
    Classification {
        verdict,
        existence: env.strict(),
    }
}

/// Source of composition pairs for envelope audits.
pub trait PairSampler {
    fn next_pair(&mut self) -> (Vec<f64>, Vec<f64>);
}

/// Log-uniform radii on `[r_min, r_max]` with directions uniform on the simplex.
pub struct LogUniformSampler {
    pub dim: usize,
    pub r_min: f64,
    pub r_max: f64,
    rng: ChaCha8Rng,
}

impl LogUniformSampler {
    pub fn new(dim: usize, r_min: f64, r_max: f64, seed: u64) -> Self {
        Self {
            dim,
            r_min,
            r_max,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// The default audit range `[1e-4, 1e4]`.
    pub fn standard(dim: usize, seed: u64) -> Self {
        Self::new(dim, 1e-4, 1e4, seed)
    }

    fn draw(&mut self) -> Vec<f64> {
        let (a, b) = (self.r_min.ln(), self.r_max.ln());
        let r = (a + (b - a) * self.rng.gen::<f64>()).exp();
        let mut dir: Vec<f64> = (0..self.dim)
            .map(|_| -(1.0 - self.rng.gen::<f64>()).ln())
            .collect();
        let s: f64 = dir.iter().sum();
        for v in dir.iter_mut() {
            *v *= r / s;
        }
        dir
    }
}

impl PairSampler for LogUniformSampler {
    fn next_pair(&mut self) -> (Vec<f64>, Vec<f64>) {
        (self.draw(), self.draw())
    }
}

/// Deterministic log-grid of radii along the first axis, all ordered pairs.
pub struct LogGridSampler {
    radii: Vec<f64>,
    dim: usize,
    next: usize,
}

impl LogGridSampler {
    pub fn new(dim: usize, r_min: f64, r_max: f64, per_axis: usize) -> Self {
        let n = per_axis.max(2);
        let (a, b) = (r_min.ln(), r_max.ln());
        let radii = (0..n)
            .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
            .collect();
        Self { radii, dim, next: 0 }
    }

    pub fn len(&self) -> usize {
        self.radii.len() * self.radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }

    fn vector(&self, r: f64, diagonal: bool) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        if diagonal && self.dim > 1 {
            let share = r / self.dim as f64;
            v.iter_mut().for_each(|c| *c = share);
        } else {
            v[0] = r;
        }
        v
    }
}

impl PairSampler for LogGridSampler {
    fn next_pair(&mut self) -> (Vec<f64>, Vec<f64>) {
        let n = self.radii.len();
        let k = self.next % (n * n);
        self.next += 1;
        let (i, j) = (k / n, k % n);
        (self.vector(self.radii[i], false), self.vector(self.radii[j], true))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeStats {
    pub regime: Regime,
    pub samples: usize,
    pub max_ratio: f64,
}

/// Outcome of a numerical envelope audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub kernel: String,
    pub samples: usize,
    pub tol: f64,
    pub max_ratio: f64,
    pub worst_regime: Option<Regime>,
    pub worst_pair: Option<(f64, f64)>,
    pub regimes: Vec<RegimeStats>,
    pub upper_pass: bool,
    pub min_lower_ratio: Option<f64>,
    pub lower_pass: Option<bool>,
    /// Largest |K(x,y) - K(y,x)| seen.
    pub asymmetry: f64,
    /// Largest K / (2 c2 w(x) w(y)) seen.
    pub majorant_ratio: f64,
    pub negative_values: usize,
    pub pass: bool,
}

pub const ENVELOPE_TOL: f64 = 1e-12;

/// Audit the envelope (and the gel lower bound, if any) on `n_samples` pairs.
pub fn validate_envelope(
    kernel: &Kernel,
    sampler: &mut dyn PairSampler,
    n_samples: usize,
) -> Result<BoundReport> {
    if n_samples == 0 {
        return Err(CoagError::Parameter("validate_envelope needs at least one sample".into()));
    }
    let env = &kernel.envelope;
    let w = env.weight_fn();
    let regimes = [Regime::SmallSmall, Regime::LargeSmall, Regime::LargeLarge];
    let mut stats: Vec<RegimeStats> = regimes
        .iter()
        .map(|&regime| RegimeStats {
            regime,
            samples: 0,
            max_ratio: 0.0,
        })
        .collect();
    let mut max_ratio = 0.0f64;
    let mut worst_regime = None;
    let mut worst_pair = None;
    let mut min_lower = f64::INFINITY;
    let mut asym = 0.0f64;
    let mut majorant = 0.0f64;
    let mut negatives = 0;

    for _ in 0..n_samples {
        let (x, y) = sampler.next_pair();
        let nx = check_composition(&x)?;
        let ny = check_composition(&y)?;
        let k = kernel.eval(&x, &y)?;
        let k_rev = kernel.eval(&y, &x)?;
        asym = asym.max((k - k_rev).abs());
        if k < 0.0 {
            negatives += 1;
        }
        let bound = envelope_at_norms(env, nx, ny);
        let ratio = if bound > 0.0 {
            k / bound
        } else if k > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        let regime = Regime::of(nx, ny);
        let slot = regimes.iter().position(|r| *r == regime).unwrap();
        stats[slot].samples += 1;
        stats[slot].max_ratio = stats[slot].max_ratio.max(ratio);
        if ratio > max_ratio || worst_regime.is_none() {
            max_ratio = max_ratio.max(ratio);
            worst_regime = Some(regime);
            worst_pair = Some((nx, ny));
        }
        let maj = 2.0 * env.c2 * w.at_norm(nx) * w.at_norm(ny);
        if maj > 0.0 {
            majorant = majorant.max(k / maj);
        } else if k > 0.0 {
            majorant = f64::INFINITY;
        }
        if let Some(g) = &kernel.gel {
            let lb = g.lower_bound(nx, ny);
            if lb > 0.0 {
                min_lower = min_lower.min(k / lb);
            }
        }
    }
    let upper_pass = max_ratio <= 1.0 + ENVELOPE_TOL && negatives == 0 && asym == 0.0;
    let (min_lower_ratio, lower_pass) = match kernel.gel {
        Some(_) => (Some(min_lower), Some(min_lower >= 1.0 - ENVELOPE_TOL)),
        None => (None, None),
    };
    Ok(BoundReport {
        kernel: kernel.name.clone(),
        samples: n_samples,
        tol: ENVELOPE_TOL,
        max_ratio,
        worst_regime,
        worst_pair,
        regimes: stats,
        upper_pass,
        min_lower_ratio,
        lower_pass,
        asymmetry: asym,
        majorant_ratio: majorant,
        negative_values: negatives,
        pass: upper_pass && lower_pass.unwrap_or(true),
    })
}

/// Deterministic grid sweep followed by random log-uniform pairs, merged into one report.
pub fn audit_envelope(kernel: &Kernel, dim: usize, grid_per_axis: usize, random: usize, seed: u64) -> Result<BoundReport> {
    let mut grid = LogGridSampler::new(dim, 1e-4, 1e4, grid_per_axis);
    let n = grid.len();
    let a = validate_envelope(kernel, &mut grid, n)?;
    let mut rnd = LogUniformSampler::standard(dim, seed);
    let b = validate_envelope(kernel, &mut rnd, random.max(1))?;
    Ok(merge_reports(a, b))
}

fn merge_reports(a: BoundReport, b: BoundReport) -> BoundReport {
    let regimes = a
        .regimes
        .iter()
        .zip(&b.regimes)
        .map(|(x, y)| RegimeStats {
            regime: x.regime,
            samples: x.samples + y.samples,
            max_ratio: x.max_ratio.max(y.max_ratio),
        })
        .collect();
    let (max_ratio, worst_regime, worst_pair) = if a.max_ratio >= b.max_ratio {
        (a.max_ratio, a.worst_regime, a.worst_pair)
    } else {
        (b.max_ratio, b.worst_regime, b.worst_pair)
    };
    let min_lower_ratio = match (a.min_lower_ratio, b.min_lower_ratio) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, y) => x.or(y),
    };
    let lower_pass = min_lower_ratio.map(|m| m >= 1.0 - ENVELOPE_TOL);
    let upper_pass = a.upper_pass && b.upper_pass;
    BoundReport {
        kernel: a.kernel,
        samples: a.samples + b.samples,
        tol: a.tol,
        max_ratio,
        worst_regime,
        worst_pair,
        regimes,
        upper_pass,
        min_lower_ratio,
        lower_pass,
        asymmetry: a.asymmetry.max(b.asymmetry),
        majorant_ratio: a.majorant_ratio.max(b.majorant_ratio),
        negative_values: a.negative_values + b.negative_values,
        pass: upper_pass && lower_pass.unwrap_or(true),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-300)
    }

    #[test]
    fn builtin_values_at_unit_sizes() {
        assert_eq!(Kernel::diffusion(1.0).eval(&[1.0], &[1.0]).unwrap(), 4.0);
        let b = Kernel::ballistic(1.0).eval(&[1.0], &[1.0]).unwrap();
        assert!(close(b, 2f64.sqrt() * 4.0, 1e-15));
        assert!((b - 5.65685).abs() < 1e-5);
        let k = Kernel::constant(1.0);
        assert_eq!(k.eval(&[0.3, 2.0], &[7.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn zero_vector_is_domain_error() {
        let k = Kernel::constant(1.0);
        assert!(matches!(k.eval(&[0.0, 0.0], &[1.0, 0.0]), Err(CoagError::Domain(_))));
        let env = k.envelope;
        assert!(envelope_value(&env, &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn envelope_branches() {
        let env = EnvelopeParams::uniform(0.5, 0.0, 0.0, 1.0).unwrap();
        assert!(close(envelope_value(&env, &[0.25], &[0.25]).unwrap(), 4.0, 1e-15));
        let env = EnvelopeParams::new(0.5, 0.0, 1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0).unwrap();
        assert!(close(envelope_value(&env, &[8.0], &[1.0]).unwrap(), 2.0, 1e-15));
        assert!(close(envelope_value(&env, &[1.0], &[8.0]).unwrap(), 2.0, 1e-15));
        let zero = EnvelopeParams::uniform(0.5, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(envelope_value(&zero, &[3.0], &[0.1]).unwrap(), 0.0);
    }

    #[test]
    fn envelope_rejects_bad_exponents() {
        assert!(EnvelopeParams::uniform(0.0, 0.0, -1.0, 1.0).is_err());
        assert!(EnvelopeParams::uniform(0.0, 1.5, 0.0, 1.0).is_err());
        let e = EnvelopeParams::uniform(0.0, 1.0, 0.0, 1.0).unwrap();
        assert!(!e.strict());
        assert!(EnvelopeParams::uniform(0.0, 0.5, 0.0, 1.0).unwrap().strict());
    }

    #[test]
    fn weight_branches() {
        let env = EnvelopeParams::new(0.5, 0.0, 1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0).unwrap();
        let w = env.weight_fn();
        assert!(close(weight(&w, &[0.25]).unwrap(), 2.0, 1e-15));
        assert_eq!(weight(&w, &[1.0]).unwrap(), 1.0);
        assert!(close(weight(&w, &[8.0]).unwrap(), 2.0, 1e-15));
        let lo = w.at_norm(1.0 - 1e-12);
        let hi = w.at_norm(1.0 + 1e-12);
        assert!((lo - hi).abs() < 1e-9);
    }

    #[test]
    fn zeta_shape() {
        assert_eq!(zeta(0.1, &[5.0]).unwrap(), 1.0);
        assert_eq!(zeta(0.1, &[20.0]).unwrap(), 0.0);
        assert!(close(zeta(0.1, &[15.0]).unwrap(), 0.5, 1e-12));
        assert!(zeta(1.5, &[1.0]).is_err());
        assert!(zeta(0.0, &[1.0]).is_err());
    }

    #[test]
    fn classification() {
        let c = classify(&Kernel::transition(1.0));
        assert_eq!(c.verdict, Verdict::MassConservingGuaranteed);
        assert!(c.existence);

        let k = Kernel::power_law(0.5, -0.75, 1.5)
            .unwrap()
            .with_gel(Some(GelParams::new(1.0, 1.5, -0.75).unwrap()))
            .unwrap();
        assert_eq!(classify(&k).verdict, Verdict::GellingGuaranteed);

        assert_eq!(classify(&Kernel::multiplicative(1.0)).verdict, Verdict::Indeterminate);
        assert!(!classify(&Kernel::multiplicative(1.0)).existence);
    }

    #[test]
    fn transition_matches_pure_regimes_and_is_continuous() {
        let t = Kernel::transition(1.0);
        let d = Kernel::diffusion(1.0);
        let b = Kernel::ballistic(1.0);
        assert_eq!(t.rate_norms(3.0, 7.0), d.rate_norms(3.0, 7.0));
        assert!(close(t.rate_norms(0.2, 0.7), b.rate_norms(0.2, 0.7) / 2f64.sqrt(), 1e-14));
        // corner and both blend edges
        assert!(close(t.rate_norms(1.0, 1.0), 4.0, 1e-14));
        for &(big, small) in &[(1.0 + 1e-9, 0.3), (4.0, 1.0 - 1e-9), (1.0 + 1e-9, 1.0 - 1e-9)] {
            let inside = t.rate_norms(big, small);
            let edge = if (big - 1.0).abs() < 1e-6 {
                b.rate_norms(1.0, small) / 2f64.sqrt()
            } else {
                d.rate_norms(big, 1.0)
            };
            assert!(close(inside, edge, 1e-6), "{big} {small}: {inside} vs {edge}");
        }
    }

    #[test]
    fn constant_kernel_ratio_is_exactly_one() {
        let k = Kernel::constant(1.0);
        let mut s = LogUniformSampler::standard(2, 3);
        let r = validate_envelope(&k, &mut s, 2000).unwrap();
        assert!(r.pass);
        assert_eq!(r.max_ratio, 1.0);
    }

    #[test]
    fn multiplicative_against_flat_small_envelope_fails_large_small() {
        let env = EnvelopeParams::new(0.0, 0.0, 0.0, 2.0, -1.0, 1.0).unwrap();
        let k = Kernel::multiplicative(1.0).with_envelope(env).unwrap();
        let r = audit_envelope(&k, 1, 200, 2000, 1).unwrap();
        assert!(!r.pass);
        assert_eq!(r.worst_regime, Some(Regime::LargeSmall));
        let ss = r.regimes.iter().find(|s| s.regime == Regime::SmallSmall).unwrap();
        assert!(ss.max_ratio <= 1.0);
    }

    #[test]
    fn ballistic_with_flat_small_envelope_fails_small_small() {
        let b = Kernel::ballistic(1.0);
        let env = EnvelopeParams { beta: 0.0, ..b.envelope };
        let k = b.with_envelope(env).unwrap();
        let r = audit_envelope(&k, 1, 200, 2000, 1).unwrap();
        assert!(!r.pass);
        assert_eq!(r.worst_regime, Some(Regime::SmallSmall));
    }

    #[test]
    fn sampler_rejects_zero_vectors() {
        struct Zero;
        impl PairSampler for Zero {
            fn next_pair(&mut self) -> (Vec<f64>, Vec<f64>) {
                (vec![0.0], vec![1.0])
            }
        }
        let k = Kernel::constant(1.0);
        assert!(matches!(validate_envelope(&k, &mut Zero, 3), Err(CoagError::Domain(_))));
    }

    #[test]
    fn gel_lower_bound_reported() {
        let k = Kernel::multiplicative(1.0);
        let r = audit_envelope(&k, 2, 100, 1000, 9).unwrap();
        assert!(r.pass, "{r:?}");
        assert!((r.min_lower_ratio.unwrap() - 1.0).abs() < 1e-12);
    }

    fn builtins() -> Vec<Kernel> {
        vec![
            Kernel::constant(2.0),
            Kernel::additive(1.0),
            Kernel::multiplicative(1.0),
            Kernel::product(vec![vec![1.0, 0.5], vec![0.5, 2.0]]).unwrap(),
            Kernel::power_law(0.5, -0.75, 1.5).unwrap(),
            Kernel::power_law(1.0, 0.2, 0.5).unwrap(),
            Kernel::diffusion(1.0),
            Kernel::ballistic(1.0),
            Kernel::transition(1.0),
        ]
    }

    #[test]
    fn builtins_symmetric_on_many_pairs() {
        let mut s = LogUniformSampler::standard(2, 77);
        let ks = builtins();
        for _ in 0..100_000 / ks.len() {
            let (x, y) = s.next_pair();
            for k in &ks {
                assert_eq!(k.eval(&x, &y).unwrap(), k.eval(&y, &x).unwrap(), "{}", k.name);
            }
        }
    }

    #[test]
    fn builtins_pass_their_own_envelope() {
        for k in builtins() {
            let r = audit_envelope(&k, 2, 300, 20_000, 5).unwrap();
            assert!(r.upper_pass, "{}: {:?}", k.name, r);
            assert!(r.majorant_ratio <= 1.0, "{}", k.name);
            if let Some(lp) = r.lower_pass {
                assert!(lp, "{} lower bound: {:?}", k.name, r.min_lower_ratio);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn homogeneous_builtins_scale(rho in 1e-3f64..1e3, a in 1e-2f64..1e2, b in 1e-2f64..1e2, t in 0.0f64..1.0) {
            for k in builtins() {
                let Some(h) = k.homogeneity else { continue };
                let x = [a * t + 1e-3, a * (1.0 - t)];
                let y = [b, b * t];
                let xs: Vec<f64> = x.iter().map(|v| v * rho).collect();
                let ys: Vec<f64> = y.iter().map(|v| v * rho).collect();
                let lhs = k.eval(&xs, &ys).unwrap();
                let rhs = rho.powf(h.gamma) * k.eval(&x, &y).unwrap();
                proptest::prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs(), "{}: {} vs {}", k.name, lhs, rhs);
            }
        }

        #[test]
        fn zeta_sandwich(eps in 1e-3f64..0.999, r in 1e-3f64..1e4) {
            let z = zeta_norm(eps, r);
            let lo = if r <= 1.0 / eps { 1.0 } else { 0.0 };
            let hi = if r <= 2.0 / eps { 1.0 } else { 0.0 };
            proptest::prop_assert!(lo <= z && z <= hi);
        }

        #[test]
        fn weight_positive(r in 1e-6f64..1e6, beta in -1.0f64..1.0, g in 0.0f64..1.0) {
            let env = EnvelopeParams::uniform(beta, g, 0.0, 1.0).unwrap();
            proptest::prop_assert!(env.weight_fn().at_norm(r) > 0.0);
        }
    }
}
