//! Regularized solver: Picard iteration of the survival/gain fixed-point map on
//! short windows, glued end to end.
//!
//! Inside a window every occupied grid cell becomes a *slot* with a fixed
//! kernel position. Pair rates, cutoff factors and gain targets are computed
//! once per slot pair and reused by every Picard sweep. Each slot carries a
//! weight series and a mass-vector series on the uniform window grid; gains are
//! placed at the sum of the parents' barycenters, so the mass vector is
//! balanced pair by pair.
//!
//! A gain landing in an unoccupied cell stays a *candidate* until the mass it
//! would create in the window reaches the pruning threshold. Mass that never
//! makes it into a slot is tallied as pruned, and mass sent past the cutoff is
//! tallied as truncation flux.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoagError, Result};
use crate::kernels::{check_eps, envelope_at_norms, norm1, zeta_norm, Kernel};
use crate::measures::{compact, BinGrid, CellKey, MeasureState, Particle};
use crate::trajectory::{Trajectory, TrajectoryMeta, WindowReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowPolicy {
    /// Window length from the contraction bound, recomputed at every window start.
    Theorem,
    Fixed(f64),
}

/// Quadrature of the survival factor `exp(-int a)` across one time step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurvivalRule {
    /// `(1 - h_{m-1}) / (1 + h_m)`; balances loss against gain exactly, so the
    /// mass vector is conserved at the fixed point.
    Trapezoidal,
    /// `exp(-h_{m-1} - h_m)`.
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizationParams {
    pub eps: f64,
    pub picard_tol: f64,
    pub max_picard_iters: usize,
    /// Time steps per window (the floor; more are used if the loss rate demands it).
    pub steps_per_window: usize,
    pub grid: BinGrid,
    pub window: WindowPolicy,
    pub survival: SurvivalRule,
    /// Candidate cells are materialized once their created mass reaches
    /// `prune_rel * M1(0)`.
    pub prune_rel: f64,
    pub max_cells: usize,
    pub output_times: Vec<f64>,
}

impl RegularizationParams {
    pub fn new(dim: usize, eps: f64) -> Result<Self> {
        let p = Self {
            eps,
            picard_tol: 1e-10,
            max_picard_iters: 60,
            steps_per_window: 64,
            grid: BinGrid::new(dim, eps)?,
            window: WindowPolicy::Theorem,
            survival: SurvivalRule::Trapezoidal,
            prune_rel: 1e-16,
            max_cells: 3000,
            output_times: Vec::new(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_eps(self.eps)?;
        self.grid.validate()?;
        if self.grid.eps != self.eps {
            return Err(CoagError::Parameter("grid coverage must match eps".into()));
        }
        if !(self.picard_tol > 0.0) {
            return Err(CoagError::Parameter("picard_tol must be positive".into()));
        }
        if self.max_picard_iters == 0 || self.steps_per_window == 0 {
            return Err(CoagError::Parameter("iteration and step counts must be positive".into()));
        }
        if let WindowPolicy::Fixed(t) = self.window {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CoagError::Parameter("fixed window length must be positive".into()));
            }
        }
        if !(self.prune_rel >= 0.0) {
            return Err(CoagError::Parameter("prune_rel must be nonnegative".into()));
        }
        if self.output_times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(CoagError::Parameter("output times must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// `a[g](x) = sum_j w_j K(x, x_j)`.
pub fn loss_rate(kernel: &Kernel, state: &MeasureState, x: &[f64]) -> Result<f64> {
    let mut a = 0.0;
    for p in &state.particles {
        a += p.w * kernel.eval(x, &p.x)?;
    }
    Ok(a)
}

/// Upper estimate of `sup K` over pairs with radii in `[eps, 2/eps]`: envelope at
/// the band corners joined with the kernel over all support pairs.
pub fn band_kernel_norm(kernel: &Kernel, state: &MeasureState, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let corners = [eps, 1.0, 2.0 / eps];
    let mut k = 0.0f64;
    for &a in &corners {
        for &b in &corners {
            k = k.max(envelope_at_norms(&kernel.envelope, a, b));
        }
    }
    for (i, p) in state.particles.iter().enumerate() {
        for q in &state.particles[i..] {
            k = k.max(kernel.rate(&p.x, &q.x));
        }
    }
    Ok(k)
}

/// `1 / (12 ||K|| (1 + M0)^2)`.
pub fn window_length_from_norm(kernel_norm: f64, m0: f64) -> Result<f64> {
    if !(kernel_norm > 0.0) {
        return Err(CoagError::DegenerateKernel);
    }
    Ok(1.0 / (12.0 * kernel_norm * (1.0 + m0).powi(2)))
}

pub fn window_length(kernel: &Kernel, state: &MeasureState, eps: f64) -> Result<f64> {
    window_length_from_norm(band_kernel_norm(kernel, state, eps)?, state.total_weight())
}

/// States on a uniform time grid covering one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPath {
    pub times: Vec<f64>,
    pub states: Vec<MeasureState>,
}

impl WindowPath {
    /// The constant-in-time path `g(s) = f0`.
    pub fn constant(f0: &MeasureState, length: f64, steps: usize) -> Self {
        let t0 = f0.time;
        let times: Vec<f64> = (0..=steps).map(|m| t0 + length * m as f64 / steps as f64).collect();
        let states = times
            .iter()
            .map(|&t| MeasureState {
                time: t,
                ..f0.clone()
            })
            .collect();
        Self { times, states }
    }

    pub fn last(&self) -> &MeasureState {
        self.states.last().expect("window path is never empty")
    }

    fn uniform_step(&self) -> Result<f64> {
        if self.times.len() < 2 || self.times.len() != self.states.len() {
            return Err(CoagError::NonUniformGrid("need at least two grid times, one state each".into()));
        }
        let dt = self.times[1] - self.times[0];
        if !(dt > 0.0) {
            return Err(CoagError::NonUniformGrid("grid times must increase".into()));
        }
        for w in self.times.windows(2) {
            if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt {
                return Err(CoagError::NonUniformGrid(format!(
                    "step {} differs from {dt}",
                    w[1] - w[0]
                )));
            }
        }
        Ok(dt)
    }
}

const NO_TARGET: u32 = u32::MAX;

struct Cell {
    key: CellKey,
    pos: Vec<f64>,
    norm: f64,
    lattice: bool,
    active: Option<usize>,
}

struct Pair {
    i: u32,
    j: u32,
    k: f64,
    target: u32,
    gain: f64,
    trunc: f64,
    /// Half for the diagonal pair, one otherwise.
    sym: f64,
    /// Either side is a bin cell, whose barycenter moves within the window.
    binned: bool,
}

/// Time-major series over the active slots.
#[derive(Clone)]
struct Series {
    na: usize,
    w: Vec<f64>,
    mv: Vec<f64>,
}

struct Level {
    a: Vec<f64>,
    gain: Vec<f64>,
    gmass: Vec<f64>,
    trunc: Vec<f64>,
}

struct Applied {
    series: Series,
    promoted: bool,
    flux: Vec<f64>,
    candidate_loss: Vec<f64>,
    max_h: f64,
}

struct Engine<'a> {
    kernel: &'a Kernel,
    grid: &'a BinGrid,
    eps: f64,
    dim: usize,
    steps: usize,
    dt: f64,
    survival: SurvivalRule,
    prune_abs: f64,
    promote_all: bool,
    max_cells: usize,
    cells: Vec<Cell>,
    lookup: HashMap<CellKey, u32>,
    active: Vec<u32>,
    pairs: Vec<Pair>,
    f0w: Vec<f64>,
    f0mv: Vec<f64>,
}

impl<'a> Engine<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        kernel: &'a Kernel,
        grid: &'a BinGrid,
        eps: f64,
        steps: usize,
        dt: f64,
        survival: SurvivalRule,
        prune_abs: f64,
        promote_all: bool,
        max_cells: usize,
    ) -> Self {
        Self {
            kernel,
            grid,
            eps,
            dim: grid.dim,
            steps,
            dt,
            survival,
            prune_abs,
            promote_all,
            max_cells,
            cells: Vec::new(),
            lookup: HashMap::new(),
            active: Vec::new(),
            pairs: Vec::new(),
            f0w: Vec::new(),
            f0mv: Vec::new(),
        }
    }

    fn cell_id(&mut self, key: CellKey, pos: Vec<f64>) -> u32 {
        if let Some(&id) = self.lookup.get(&key) {
            return id;
        }
        let id = self.cells.len() as u32;
        let lattice = matches!(key, CellKey::Lattice(_));
        let pos = match &key {
            CellKey::Lattice(a) => a.iter().map(|&v| v as f64).collect(),
            CellKey::Bin { .. } => pos,
        };
        self.cells.push(Cell {
            key: key.clone(),
            norm: norm1(&pos),
            pos,
            lattice,
            active: None,
        });
        self.lookup.insert(key, id);
        id
    }

    fn activate(&mut self, id: u32) -> Result<()> {
        if self.cells[id as usize].active.is_some() {
            return Ok(());
        }
        if self.active.len() >= self.max_cells {
            return Err(CoagError::Resource(format!(
                "support exceeds {} cells; coarsen the grid or raise max_cells",
                self.max_cells
            )));
        }
        let r = self.active.len();
        self.cells[id as usize].active = Some(r);
        self.active.push(id);
        let pr = self.cells[id as usize].pos.clone();
        for s in 0..=r {
            let sid = self.active[s] as usize;
            let ps = &self.cells[sid].pos;
            let k = self.kernel.rate(ps, &pr);
            let sum: Vec<f64> = ps.iter().zip(&pr).map(|(a, b)| a + b).collect();
            let z = zeta_norm(self.eps, norm1(&sum));
            let sym = if s == r { 0.5 } else { 1.0 };
            let target = if z > 0.0 {
                let key = self.grid.cell_of(&sum);
                self.cell_id(key, sum)
            } else {
                NO_TARGET
            };
            let binned = !self.cells[sid].lattice || !self.cells[id as usize].lattice;
            self.pairs.push(Pair {
                i: s as u32,
                j: r as u32,
                k,
                target,
                gain: sym * k * z,
                trunc: sym * k * (1.0 - z),
                sym,
                binned,
            });
        }
        Ok(())
    }

    /// Seed slots from a state; returns the slot index of each particle.
    fn seed(&mut self, state: &MeasureState) -> Result<Vec<usize>> {
        let mut slots = Vec::with_capacity(state.len());
        for (i, p) in state.particles.iter().enumerate() {
            let key = self.grid.try_cell(i, &p.x)?;
            let id = self.cell_id(key, p.x.clone());
            self.activate(id)?;
            slots.push(self.cells[id as usize].active.unwrap());
        }
        Ok(slots)
    }

    fn set_initial(&mut self, state: &MeasureState, slots: &[usize]) {
        let na = self.active.len();
        let d = self.dim;
        self.f0w = vec![0.0; na];
        self.f0mv = vec![0.0; na * d];
        for (p, &r) in state.particles.iter().zip(slots) {
            self.f0w[r] += p.w;
            for k in 0..d {
                self.f0mv[r * d + k] += p.w * p.x[k];
            }
        }
    }

    fn constant_series(&self) -> Series {
        let m1 = self.steps + 1;
        let na = self.f0w.len();
        let mut w = Vec::with_capacity(m1 * na);
        let mut mv = Vec::with_capacity(m1 * na * self.dim);
        for _ in 0..m1 {
            w.extend_from_slice(&self.f0w);
            mv.extend_from_slice(&self.f0mv);
        }
        Series { na, w, mv }
    }

    fn level(&self, g: &Series, m: usize) -> Level {
        let na = g.na;
        let d = self.dim;
        let nc = self.cells.len();
        let w = &g.w[m * na..(m + 1) * na];
        let mv = &g.mv[m * na * d..(m + 1) * na * d];
        let mut b = vec![0.0; na * d];
        for r in 0..na {
            let cell = &self.cells[self.active[r] as usize];
            if cell.lattice || w[r] <= 0.0 {
                b[r * d..(r + 1) * d].copy_from_slice(&cell.pos);
            } else {
                for k in 0..d {
                    b[r * d + k] = mv[r * d + k] / w[r];
                }
            }
        }
        let mut a = vec![0.0; na];
        let mut gain = vec![0.0; nc];
        let mut gmass = vec![0.0; nc * d];
        let mut trunc = vec![0.0; d];
        for p in &self.pairs {
            let (i, j) = (p.i as usize, p.j as usize);
            if j >= na {
                break;
            }
            let (wi, wj) = (w[i], w[j]);
            // Rates of bin cells follow their current barycenters.
            let (k, gk, tk) = if p.binned && p.target != NO_TARGET {
                let (bi, bj) = (&b[i * d..(i + 1) * d], &b[j * d..(j + 1) * d]);
                let k = self.kernel.rate(bi, bj);
                let z = zeta_norm(self.eps, bi.iter().zip(bj).map(|(x, y)| (x + y).abs()).sum());
                (k, p.sym * k * z, p.sym * k * (1.0 - z))
            } else {
                (p.k, p.gain, p.trunc)
            };
            a[i] += k * wj;
            if i != j {
                a[j] += k * wi;
            }
            let ww = wi * wj;
            if ww == 0.0 {
                continue;
            }
            if p.target != NO_TARGET {
                let t = p.target as usize;
                let gv = gk * ww;
                gain[t] += gv;
                for k in 0..d {
                    gmass[t * d + k] += gv * (b[i * d + k] + b[j * d + k]);
                }
            }
            if tk > 0.0 {
                let tv = tk * ww;
                for k in 0..d {
                    trunc[k] += tv * (b[i * d + k] + b[j * d + k]);
                }
            }
        }
        Level { a, gain, gmass, trunc }
    }

    fn trap_weight(&self, m: usize) -> f64 {
        if m == 0 || m == self.steps {
            0.5 * self.dt
        } else {
            self.dt
        }
    }

    fn apply(&mut self, g: &Series) -> Result<Applied> {
        let m1 = self.steps + 1;
        let d = self.dim;
        let na = g.na;
        debug_assert_eq!(na, self.active.len());
        let mut levels: Vec<Level> = (0..m1).into_par_iter().map(|m| self.level(g, m)).collect();

        let mut flux = vec![0.0; d];
        for (m, lv) in levels.iter().enumerate() {
            let tw = self.trap_weight(m);
            for k in 0..d {
                flux[k] += tw * lv.trunc[k];
            }
        }

        // Decide which candidate cells become slots.
        let nc = self.cells.len();
        let mut promote = Vec::new();
        let mut candidate_loss = vec![0.0; d];
        for c in 0..nc {
            if self.cells[c].active.is_some() {
                continue;
            }
            let created: f64 = (0..m1).map(|m| self.trap_weight(m) * levels[m].gain[c]).sum();
            if created <= 0.0 {
                continue;
            }
            if self.promote_all || created * self.cells[c].norm >= self.prune_abs {
                promote.push(c as u32);
            } else {
                for (m, lv) in levels.iter().enumerate() {
                    let tw = self.trap_weight(m);
                    for k in 0..d {
                        candidate_loss[k] += tw * lv.gmass[c * d + k];
                    }
                }
            }
        }
        let old_pairs = self.pairs.len();
        for &c in &promote {
            self.activate(c)?;
        }
        let na_new = self.active.len();

        // Loss rates of the new slots against the current iterate.
        if na_new > na {
            for (m, lv) in levels.iter_mut().enumerate() {
                let w = &g.w[m * na..(m + 1) * na];
                lv.a.resize(na_new, 0.0);
                for p in &self.pairs[old_pairs..] {
                    let (i, j) = (p.i as usize, p.j as usize);
                    if i < na {
                        lv.a[j] += p.k * w[i];
                    }
                }
            }
        }

        let mut w = vec![0.0; m1 * na_new];
        let mut mv = vec![0.0; m1 * na_new * d];
        let n0 = self.f0w.len();
        w[..n0].copy_from_slice(&self.f0w);
        mv[..n0 * d].copy_from_slice(&self.f0mv);
        let half = 0.5 * self.dt;
        let mut max_h = 0.0f64;
        for m in 1..m1 {
            let (prev, cur) = (&levels[m - 1], &levels[m]);
            for r in 0..na_new {
                let c = self.active[r] as usize;
                let h0 = half * prev.a[r];
                let h1 = half * cur.a[r];
                max_h = max_h.max(h0).max(h1);
                let (gp, gc) = (prev.gain[c], cur.gain[c]);
                let wp = w[(m - 1) * na_new + r];
                let (carry, inflow) = match self.survival {
                    SurvivalRule::Trapezoidal => ((1.0 - h0) / (1.0 + h1), 1.0 / (1.0 + h1)),
                    SurvivalRule::Exponential => {
                        let rho = (-h0 - h1).exp();
                        (rho, 1.0)
                    }
                };
                let (gp_f, gc_f) = match self.survival {
                    SurvivalRule::Trapezoidal => (inflow, inflow),
                    SurvivalRule::Exponential => (carry, 1.0),
                };
                w[m * na_new + r] = carry * wp + half * (gp_f * gp + gc_f * gc);
                for k in 0..d {
                    let mp = mv[((m - 1) * na_new + r) * d + k];
                    let (qp, qc) = (prev.gmass[c * d + k], cur.gmass[c * d + k]);
                    mv[(m * na_new + r) * d + k] = carry * mp + half * (gp_f * qp + gc_f * qc);
                }
            }
        }
        Ok(Applied {
            series: Series { na: na_new, w, mv },
            promoted: !promote.is_empty(),
            flux,
            candidate_loss,
            max_h,
        })
    }

    fn distance(&self, a: &Series, b: &Series) -> f64 {
        let m1 = self.steps + 1;
        let mut best = 0.0f64;
        for m in 0..m1 {
            let n = a.na.max(b.na);
            let mut s = 0.0;
            for r in 0..n {
                let va = if r < a.na { a.w[m * a.na + r] } else { 0.0 };
                let vb = if r < b.na { b.w[m * b.na + r] } else { 0.0 };
                s += (va - vb).abs();
            }
            best = best.max(s);
        }
        best
    }

    /// State at level `m`. Slots with zero weight are skipped.
    fn state_at(&self, s: &Series, m: usize, time: f64) -> MeasureState {
        let d = self.dim;
        let mut rows: Vec<(&CellKey, Particle)> = Vec::new();
        for r in 0..s.na {
            let wv = s.w[m * s.na + r];
            if wv <= 0.0 {
                continue;
            }
            let cell = &self.cells[self.active[r] as usize];
            let x = if cell.lattice {
                cell.pos.clone()
            } else {
                (0..d).map(|k| s.mv[(m * s.na + r) * d + k] / wv).collect()
            };
            rows.push((&cell.key, Particle { x, w: wv }));
        }
        rows.sort_by(|a, b| a.0.cmp(b.0));
        MeasureState {
            dim: d,
            time,
            particles: rows.into_iter().map(|(_, p)| p).collect(),
        }
    }
}

/// Outcome of one window.
#[derive(Debug, Clone)]
pub struct WindowSolution {
    pub path: WindowPath,
    pub report: WindowReport,
    /// Mass vector sent past the cutoff during the window.
    pub flux: Vec<f64>,
    /// Mass vector dropped by pruning during the window.
    pub pruned: Vec<f64>,
}

/// One application of the fixed-point map to `iterate`, with every gain
/// materialized (no pruning). The result lives on the same time grid.
pub fn picard_apply(
    kernel: &Kernel,
    eps: f64,
    grid: &BinGrid,
    f0: &MeasureState,
    iterate: &WindowPath,
) -> Result<WindowPath> {
    check_eps(eps)?;
    let dt = iterate.uniform_step()?;
    let steps = iterate.times.len() - 1;
    let mut eng = Engine::new(kernel, grid, eps, steps, dt, SurvivalRule::Exponential, 0.0, true, usize::MAX);
    let f0c = compact(f0, grid)?;
    let slots = eng.seed(&f0c)?;
    eng.set_initial(&f0c, &slots);
    // Slots for everything the iterate occupies.
    let mut binned = Vec::with_capacity(iterate.states.len());
    for s in &iterate.states {
        let c = compact(s, grid)?;
        let sl = eng.seed(&c)?;
        binned.push((c, sl));
    }
    let na = eng.active.len();
    let d = eng.dim;
    eng.f0w.resize(na, 0.0);
    eng.f0mv.resize(na * d, 0.0);
    let mut g = Series {
        na,
        w: vec![0.0; (steps + 1) * na],
        mv: vec![0.0; (steps + 1) * na * d],
    };
    for (m, (c, sl)) in binned.iter().enumerate() {
        for (p, &r) in c.particles.iter().zip(sl) {
            g.w[m * na + r] += p.w;
            for k in 0..d {
                g.mv[(m * na + r) * d + k] += p.w * p.x[k];
            }
        }
    }
    let out = eng.apply(&g)?;
    let states = iterate
        .times
        .iter()
        .enumerate()
        .map(|(m, &t)| eng.state_at(&out.series, m, t))
        .collect();
    Ok(WindowPath {
        times: iterate.times.clone(),
        states,
    })
}

fn steps_for(kernel: &Kernel, state: &MeasureState, length: f64, floor: usize) -> usize {
    let mut a_max = 0.0f64;
    for p in &state.particles {
        let a: f64 = state.particles.iter().map(|q| q.w * kernel.rate(&p.x, &q.x)).sum();
        a_max = a_max.max(a);
    }
    // keep h = dt a / 2 below 1/4 at the window start
    let need = (2.0 * length * a_max).ceil() as usize;
    floor.max(need).max(1)
}

fn run_window(
    kernel: &Kernel,
    f0: &MeasureState,
    length: f64,
    params: &RegularizationParams,
    prune_abs: f64,
    full_path: bool,
) -> Result<WindowSolution> {
    let d = f0.dim;
    let steps = steps_for(kernel, f0, length, params.steps_per_window);
    let dt = length / steps as f64;
    let theorem_length = window_length(kernel, f0, params.eps).unwrap_or(f64::INFINITY);
    let mut eng = Engine::new(
        kernel,
        &params.grid,
        params.eps,
        steps,
        dt,
        params.survival,
        prune_abs,
        false,
        params.max_cells,
    );
    let slots = eng.seed(f0)?;
    eng.set_initial(f0, &slots);
    let base = eng.constant_series();
    let mut g = base.clone();
    let mut distances = Vec::new();
    let mut ball = 0.0f64;
    let mut last = None;
    let floor = 1e-13 * (1.0 + f0.total_weight());
    for it in 1..=params.max_picard_iters {
        let out = eng.apply(&g)?;
        if out.max_h > 1.0 {
            return Err(CoagError::Parameter(format!(
                "time step too coarse: half-step loss {} exceeds 1",
                out.max_h
            )));
        }
        let dist = eng.distance(&out.series, &g);
        distances.push(dist);
        ball = ball.max(eng.distance(&out.series, &base));
        let promoted = out.promoted;
        g = out.series.clone();
        last = Some(out);
        if dist < params.picard_tol && !promoted {
            let _ = it;
            break;
        }
        if it == params.max_picard_iters {
            return Err(CoagError::NonContraction {
                iterations: it,
                distances,
            });
        }
    }
    let out = last.expect("at least one Picard sweep");
    let ratios = distances
        .windows(2)
        .filter(|w| w[1] > floor && w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .collect();
    let t0 = f0.time;
    let t_end = t0 + length;
    let path = if full_path {
        let times: Vec<f64> = (0..=steps)
            .map(|m| if m == steps { t_end } else { t0 + dt * m as f64 })
            .collect();
        let states = times.iter().enumerate().map(|(m, &t)| eng.state_at(&out.series, m, t)).collect();
        WindowPath { times, states }
    } else {
        WindowPath {
            times: vec![t_end],
            states: vec![eng.state_at(&out.series, steps, t_end)],
        }
    };
    let mut pruned = out.candidate_loss.clone();
    // Slots that end the window with negligible mass are dropped here.
    let end = path.last().clone();
    let mut kept = Vec::with_capacity(end.len());
    for p in end.particles {
        if p.w * norm1(&p.x) < prune_abs {
            for k in 0..d {
                pruned[k] += p.w * p.x[k];
            }
        } else {
            kept.push(p);
        }
    }
    let mut path = path;
    let last_idx = path.states.len() - 1;
    path.states[last_idx].particles = kept;
    Ok(WindowSolution {
        report: WindowReport {
            t_start: t0,
            length,
            steps,
            iterations: distances.len(),
            distances,
            ratios,
            ball_radius: ball,
            theorem_length,
            cells: eng.active.len(),
        },
        path,
        flux: out.flux,
        pruned,
    })
}

/// Solve one window `[t0, t0 + length]` from `f0` (already restricted and binned).
pub fn solve_window(
    kernel: &Kernel,
    f0: &MeasureState,
    length: f64,
    params: &RegularizationParams,
) -> Result<WindowSolution> {
    params.validate()?;
    if !(length > 0.0) {
        return Err(CoagError::Parameter("window length must be positive".into()));
    }
    let f0 = compact(&f0.restrict(params.eps)?, &params.grid)?;
    let prune_abs = params.prune_rel * f0.moment(1.0);
    run_window(kernel, &f0, length, params, prune_abs, true)
}

/// Glue windows from `t = 0` to `horizon`, sampling at every window end.
/// Windows are shortened so that each requested output time is hit exactly.
pub fn solve(kernel: &Kernel, f0: &MeasureState, horizon: f64, params: &RegularizationParams) -> Result<Trajectory> {
    params.validate()?;
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(CoagError::Parameter("horizon must be finite and nonnegative".into()));
    }
    if f0.dim != params.grid.dim {
        return Err(CoagError::GridMismatch(format!(
            "initial state has dimension {}, grid has {}",
            f0.dim, params.grid.dim
        )));
    }
    let d = f0.dim;
    let mut meta = TrajectoryMeta::for_kernel("regularized", kernel);
    meta.eps = Some(params.eps);
    let mut start = f0.restrict(params.eps)?;
    start.time = 0.0;
    let mut state = compact(&start, &params.grid)?;
    let mut traj = Trajectory::new(d, meta);
    let mut flux = vec![0.0; d];
    let mut pruned = vec![0.0; d];
    traj.push(state.clone(), flux.clone(), pruned.clone())?;

    let mut targets: Vec<f64> = params
        .output_times
        .iter()
        .cloned()
        .filter(|&t| t > 0.0 && t <= horizon)
        .collect();
    if horizon > 0.0 {
        targets.push(horizon);
    }
    targets.sort_by(|a, b| a.partial_cmp(b).unwrap());
    targets.dedup();

    if state.is_empty() {
        traj.meta.notes.push("restricted initial state is empty; trajectory is identically empty".into());
        for &t in &targets {
            traj.push(MeasureState::empty(d, t), flux.clone(), pruned.clone())?;
        }
        record_outputs(&mut traj, params, horizon);
        return Ok(traj);
    }
    if !kernel.envelope.strict() {
        traj.meta
            .notes
            .push("envelope has gamma_j + lambda_j = 1; existence requires the strict inequality".into());
    }

    let prune_abs = params.prune_rel * state.moment(1.0);
    let mut t = 0.0;
    for &target in &targets {
        while t < target {
            let mut len = match params.window {
                WindowPolicy::Theorem => window_length(kernel, &state, params.eps)?,
                WindowPolicy::Fixed(len) => len,
            };
            let remaining = target - t;
            // Avoid leaving a sliver window before the target.
            if len >= remaining || remaining - len < 1e-9 * remaining.max(1.0) {
                len = remaining;
            }
            let sol = run_window(kernel, &state, len, params, prune_abs, false)?;
            let t_next = if len == remaining { target } else { t + len };
            for k in 0..d {
                flux[k] += sol.flux[k];
                pruned[k] += sol.pruned[k];
            }
            let mut end = sol.path.states.into_iter().last().expect("window end");
            end.time = t_next;
            // Slot barycenters can drift past the cutoff even though the kernel
            // positions that set the gain targets did not; that mass is truncated.
            let hi = params.grid.coverage().1;
            end.particles.retain(|p| {
                let r = p.norm();
                if r > hi && !params.grid.covers(r) {
                    for k in 0..d {
                        flux[k] += p.w * p.x[k];
                    }
                    false
                } else {
                    true
                }
            });
            // Rebin so barycenters that drifted across a cell edge are merged.
            state = compact(&end, &params.grid)?;
            traj.windows.push(sol.report);
            traj.push(state.clone(), flux.clone(), pruned.clone())?;
            t = t_next;
        }
    }
    record_outputs(&mut traj, params, horizon);
    Ok(traj)
}

fn record_outputs(traj: &mut Trajectory, params: &RegularizationParams, horizon: f64) {
    let times = traj.times();
    traj.meta.output_times = params
        .output_times
        .iter()
        .filter(|&&t| t <= horizon)
        .map(|&t| {
            let idx = times
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - t).abs().partial_cmp(&(b.1 - t).abs()).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0);
            (t, idx)
        })
        .collect();
}
