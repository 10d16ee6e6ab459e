//! Lattice solver for the discrete multicomponent equation on a size-capped
//! index set, integrated with the Dormand-Prince 5(4) pair.
//!
//! Pairs whose sum exceeds the cap are absorbed: their mass is booked on a gel
//! tally (one component per species) so that `M1 + gel` stays constant.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{CoagError, Result};
use crate::kernels::Kernel;
use crate::measures::{DiscreteState, MeasureState, Particle};
use crate::trajectory::{Trajectory, TrajectoryMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Overflow {
    /// Mass leaving the cap is tallied as gel.
    Absorb,
}

#[derive(Debug, Clone)]
pub struct DiscreteSystem {
    pub kernel: Kernel,
    pub cap: u64,
    pub dim: usize,
    pub overflow: Overflow,
    /// Upper bound on the number of lattice indices.
    pub max_indices: usize,
}

impl DiscreteSystem {
    pub fn new(kernel: Kernel, dim: usize, cap: u64) -> Result<Self> {
        if cap < 2 {
            return Err(CoagError::Parameter("lattice cap must be at least 2".into()));
        }
        if dim == 0 {
            return Err(CoagError::Parameter("dimension must be at least 1".into()));
        }
        Ok(Self {
            kernel,
            cap,
            dim,
            overflow: Overflow::Absorb,
            max_indices: 20_000,
        })
    }
}

/// `dn/dt` on the occupied closure plus the gel tally rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMap {
    pub rates: BTreeMap<Vec<u32>, f64>,
    pub gel_rate: Vec<f64>,
}

fn size(a: &[u32]) -> u64 {
    a.iter().map(|&v| v as u64).sum()
}

/// Precomputed index set, kernel matrix and pair table.
struct Lattice {
    dim: usize,
    index: Vec<Vec<u32>>,
    sizes: Vec<f64>,
    kmat: Vec<f64>,
    pair_i: Vec<u32>,
    pair_j: Vec<u32>,
    pair_t: Vec<u32>,
    pair_c: Vec<f64>,
    over_i: Vec<u32>,
    over_j: Vec<u32>,
    over_c: Vec<f64>,
}

impl Lattice {
    /// `closure`: take every sum reachable within the cap, not just one step.
    fn build(sys: &DiscreteSystem, support: &BTreeSet<Vec<u32>>, closure: bool) -> Result<Self> {
        let mut set: BTreeSet<Vec<u32>> = support.clone();
        let mut frontier: Vec<Vec<u32>> = set.iter().cloned().collect();
        loop {
            let current: Vec<Vec<u32>> = set.iter().cloned().collect();
            let mut added = Vec::new();
            for a in &frontier {
                for b in &current {
                    let s: Vec<u32> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                    if size(&s) <= sys.cap && !set.contains(&s) {
                        added.push(s);
                    }
                }
            }
            if added.is_empty() {
                break;
            }
            for s in &added {
                set.insert(s.clone());
            }
            if set.len() > sys.max_indices {
                return Err(CoagError::Resource(format!(
                    "lattice closure exceeds {} indices; lower the cap",
                    sys.max_indices
                )));
            }
            if !closure {
                break;
            }
            added.sort();
            added.dedup();
            frontier = added;
        }
        let index: Vec<Vec<u32>> = set.into_iter().collect();
        let pos: HashMap<Vec<u32>, u32> = index.iter().enumerate().map(|(i, a)| (a.clone(), i as u32)).collect();
        let n = index.len();
        let fl: Vec<Vec<f64>> = index.iter().map(|a| a.iter().map(|&v| v as f64).collect()).collect();
        let sizes: Vec<f64> = index.iter().map(|a| size(a) as f64).collect();
        let mut kmat = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let k = sys.kernel.rate(&fl[i], &fl[j]);
                kmat[i * n + j] = k;
                kmat[j * n + i] = k;
            }
        }
        let mut lat = Self {
            dim: sys.dim,
            index,
            sizes,
            kmat,
            pair_i: Vec::new(),
            pair_j: Vec::new(),
            pair_t: Vec::new(),
            pair_c: Vec::new(),
            over_i: Vec::new(),
            over_j: Vec::new(),
            over_c: Vec::new(),
        };
        let mut sum = vec![0u32; sys.dim];
        for i in 0..n {
            for j in i..n {
                let k = lat.kmat[i * n + j];
                if k == 0.0 {
                    continue;
                }
                let c = if i == j { 0.5 * k } else { k };
                for (s, (a, b)) in sum.iter_mut().zip(lat.index[i].iter().zip(&lat.index[j])) {
                    *s = a + b;
                }
                if size(&sum) <= sys.cap {
                    if let Some(&t) = pos.get(sum.as_slice()) {
                        lat.pair_i.push(i as u32);
                        lat.pair_j.push(j as u32);
                        lat.pair_t.push(t);
                        lat.pair_c.push(c);
                        continue;
                    }
                    // Only possible for a one-step index set, where both parents
                    // lie outside the support and the gain is zero.
                    continue;
                }
                lat.over_i.push(i as u32);
                lat.over_j.push(j as u32);
                lat.over_c.push(c);
            }
        }
        Ok(lat)
    }

    fn len(&self) -> usize {
        self.index.len()
    }

    /// `y = [n_0..n_{N-1}, gel_1..gel_d]`.
    fn rhs(&self, y: &[f64], out: &mut [f64]) {
        let n = self.len();
        let d = self.dim;
        let (nv, _) = y.split_at(n);
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            if nv[i] == 0.0 {
                continue;
            }
            let row = &self.kmat[i * n..(i + 1) * n];
            let a: f64 = row.iter().zip(nv).map(|(k, v)| k * v).sum();
            out[i] -= nv[i] * a;
        }
        for p in 0..self.pair_i.len() {
            let (i, j) = (self.pair_i[p] as usize, self.pair_j[p] as usize);
            let g = self.pair_c[p] * nv[i] * nv[j];
            out[self.pair_t[p] as usize] += g;
        }
        for p in 0..self.over_i.len() {
            let (i, j) = (self.over_i[p] as usize, self.over_j[p] as usize);
            let g = self.over_c[p] * nv[i] * nv[j];
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                out[n + k] += g * (self.index[i][k] + self.index[j][k]) as f64;
            }
        }
    }
}

/// Right-hand side on the support of `state` plus all one-step sums within the cap.
pub fn rhs(system: &DiscreteSystem, state: &DiscreteState) -> Result<RateMap> {
    check_state(system, state)?;
    let support: BTreeSet<Vec<u32>> = state.entries.keys().cloned().collect();
    if support.is_empty() {
        return Ok(RateMap {
            rates: BTreeMap::new(),
            gel_rate: vec![0.0; system.dim],
        });
    }
    let lat = Lattice::build(system, &support, false)?;
    let n = lat.len();
    let mut y = vec![0.0; n + system.dim];
    for (i, a) in lat.index.iter().enumerate() {
        y[i] = state.get(a);
    }
    let mut out = vec![0.0; y.len()];
    lat.rhs(&y, &mut out);
    Ok(RateMap {
        rates: lat.index.iter().cloned().zip(out[..n].iter().cloned()).collect(),
        gel_rate: out[n..].to_vec(),
    })
}

fn check_state(system: &DiscreteSystem, state: &DiscreteState) -> Result<()> {
    if state.dim != system.dim {
        return Err(CoagError::Domain(format!(
            "state dimension {} does not match system dimension {}",
            state.dim, system.dim
        )));
    }
    if let Some(a) = state.entries.keys().find(|a| size(a) > system.cap) {
        return Err(CoagError::Domain(format!("index {a:?} exceeds the cap {}", system.cap)));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrateOptions {
    pub rtol: f64,
    pub atol: f64,
    pub record_times: Vec<f64>,
    pub initial_step: Option<f64>,
    pub max_steps: usize,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-14,
            record_times: Vec::new(),
            initial_step: None,
            max_steps: 10_000_000,
        }
    }
}

/// Scalar observables at every accepted step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DenseSeries {
    pub t: Vec<f64>,
    pub m0: Vec<f64>,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    /// Total gel mass (sum over species).
    pub gel: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LatticeTrajectory {
    pub dim: usize,
    pub cap: u64,
    pub records: Vec<DiscreteState>,
    pub gel: Vec<Vec<f64>>,
    pub dense: DenseSeries,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    pub meta: TrajectoryMeta,
}

impl LatticeTrajectory {
    /// First time `M1` falls `fraction` below its initial value, linearly
    /// interpolated between accepted steps.
    pub fn mass_loss_time(&self, fraction: f64) -> Option<f64> {
        first_drop(&self.dense.t, &self.dense.m1, fraction)
    }

    pub fn record_at(&self, t: f64) -> Option<&DiscreteState> {
        self.records.iter().find(|r| (r.time - t).abs() <= 1e-12 * (1.0 + t))
    }

    /// Records as measure samples with the gel tally as truncation flux.
    pub fn to_trajectory(&self) -> Result<Trajectory> {
        let mut tr = Trajectory::new(self.dim, self.meta.clone());
        for (r, g) in self.records.iter().zip(&self.gel) {
            let m = MeasureState {
                dim: self.dim,
                time: r.time,
                particles: r
                    .entries
                    .iter()
                    .filter(|(_, n)| **n > 0.0)
                    .map(|(a, n)| Particle {
                        x: a.iter().map(|&v| v as f64).collect(),
                        w: *n,
                    })
                    .collect(),
            };
            tr.push(m, g.clone(), vec![0.0; self.dim])?;
        }
        let times = tr.times();
        tr.meta.output_times = times.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        Ok(tr)
    }
}

/// First time a series drops below `(1 - fraction)` times its first value.
pub fn first_drop(t: &[f64], v: &[f64], fraction: f64) -> Option<f64> {
    let v0 = *v.first()?;
    let level = (1.0 - fraction) * v0;
    for k in 1..v.len() {
        if v[k] <= level {
            let (a, b) = (v[k - 1], v[k]);
            let s = if a == b { 1.0 } else { (a - level) / (a - b) };
            return Some(t[k - 1] + s * (t[k] - t[k - 1]));
        }
    }
    None
}

// Dormand-Prince 5(4) tableau (autonomous system, so the nodes are not needed).
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

fn observables(lat: &Lattice, y: &[f64]) -> (f64, f64, f64, f64) {
    let n = lat.len();
    let mut m = (0.0, 0.0, 0.0);
    for i in 0..n {
        let s = lat.sizes[i];
        m.0 += y[i];
        m.1 += s * y[i];
        m.2 += s * s * y[i];
    }
    (m.0, m.1, m.2, y[n..].iter().sum())
}

fn snapshot(lat: &Lattice, y: &[f64], t: f64, cap: u64) -> (DiscreteState, Vec<f64>) {
    let n = lat.len();
    let mut s = DiscreteState::new(lat.dim, cap);
    s.time = t;
    for i in 0..n {
        if y[i] != 0.0 {
            s.entries.insert(lat.index[i].clone(), y[i]);
        }
    }
    (s, y[n..].to_vec())
}

/// Integrate from `n0` to `horizon`, recording at `opts.record_times` (plus 0 and the horizon).
pub fn integrate(
    system: &DiscreteSystem,
    n0: &DiscreteState,
    horizon: f64,
    opts: &IntegrateOptions,
) -> Result<LatticeTrajectory> {
    check_state(system, n0)?;
    if !(opts.rtol > 0.0) || !(opts.atol >= 0.0) {
        return Err(CoagError::Parameter("rtol must be positive and atol nonnegative".into()));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(CoagError::Parameter("horizon must be finite and nonnegative".into()));
    }
    let d = system.dim;
    let support: BTreeSet<Vec<u32>> = n0.entries.iter().filter(|(_, v)| **v > 0.0).map(|(a, _)| a.clone()).collect();
    let lat = Lattice::build(system, &support, true)?;
    let n = lat.len();
    let dof = n + d;
    let mut y = vec![0.0; dof];
    for (i, a) in lat.index.iter().enumerate() {
        y[i] = n0.get(a);
    }
    let weights: Vec<f64> = lat.sizes.iter().map(|s| 1.0 + s).chain(std::iter::repeat_n(1.0, d)).collect();

    let mut records_t: Vec<f64> = opts.record_times.iter().cloned().filter(|&t| t > 0.0 && t <= horizon).collect();
    records_t.push(horizon);
    records_t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    records_t.dedup();

    let mut meta = TrajectoryMeta::for_kernel("discrete", &system.kernel);
    meta.notes.push(format!("cap {}", system.cap));
    let mut out = LatticeTrajectory {
        dim: d,
        cap: system.cap,
        records: Vec::new(),
        gel: Vec::new(),
        dense: DenseSeries::default(),
        steps_accepted: 0,
        steps_rejected: 0,
        meta,
    };
    let push_dense = |out: &mut LatticeTrajectory, t: f64, y: &[f64]| {
        let (m0, m1, m2, g) = observables(&lat, y);
        out.dense.t.push(t);
        out.dense.m0.push(m0);
        out.dense.m1.push(m1);
        out.dense.m2.push(m2);
        out.dense.gel.push(g);
    };
    let (s0, g0) = snapshot(&lat, &y, 0.0, system.cap);
    out.records.push(s0);
    out.gel.push(g0);
    push_dense(&mut out, 0.0, &y);
    if horizon == 0.0 || n == 0 {
        for &t in &records_t {
            if t > 0.0 {
                let (s, g) = snapshot(&lat, &y, t, system.cap);
                out.records.push(s);
                out.gel.push(g);
            }
        }
        return Ok(out);
    }

    let mut k: Vec<Vec<f64>> = vec![vec![0.0; dof]; 7];
    let mut tmp = vec![0.0; dof];
    let mut y5 = vec![0.0; dof];
    lat.rhs(&y, &mut k[0]);
    let mut t = 0.0;
    let mut h = opts.initial_step.unwrap_or_else(|| {
        let scale: f64 = y.iter().zip(&weights).map(|(v, w)| v.abs() * w).sum::<f64>().max(1e-300);
        let rate: f64 = k[0].iter().zip(&weights).map(|(v, w)| v.abs() * w).sum::<f64>();
        if rate > 0.0 {
            (0.01 * scale / rate).min(horizon)
        } else {
            horizon
        }
    });
    let h_min = 1e-14 * horizon;
    let mut next_rec = 0;
    while next_rec < records_t.len() {
        if out.steps_accepted + out.steps_rejected >= opts.max_steps {
            return Err(CoagError::Resource(format!("exceeded {} integration steps", opts.max_steps)));
        }
        let target = records_t[next_rec];
        let mut hit = false;
        let mut hs = h;
        if t + hs >= target - 1e-12 * target.max(1.0) {
            hs = target - t;
            hit = true;
        }
        for s in 1..7 {
            for q in 0..dof {
                let mut acc = 0.0;
                for (r, kr) in k.iter().enumerate().take(s) {
                    let a = A[s][r];
                    if a != 0.0 {
                        acc += a * kr[q];
                    }
                }
                tmp[q] = y[q] + hs * acc;
            }
            lat.rhs(&tmp, &mut k[s]);
        }
        // tmp holds the 5th-order solution (stage 7 is evaluated there)
        let mut err_num = 0.0;
        let mut scale = 0.0;
        for q in 0..dof {
            let mut e = 0.0;
            for s in 0..7 {
                e += (B5[s] - B4[s]) * k[s][q];
            }
            y5[q] = tmp[q];
            err_num += weights[q] * (hs * e).abs();
            scale += weights[q] * y[q].abs().max(y5[q].abs());
        }
        let err = err_num / (opts.atol * dof as f64 + opts.rtol * scale);
        if err <= 1.0 {
            t = if hit { target } else { t + hs };
            std::mem::swap(&mut y, &mut y5);
            k.swap(0, 6);
            out.steps_accepted += 1;
            push_dense(&mut out, t, &y);
            if hit {
                let (s, g) = snapshot(&lat, &y, t, system.cap);
                out.records.push(s);
                out.gel.push(g);
                next_rec += 1;
            }
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            // Do not let a short step forced by a record time shrink the next one.
            h = if hit { h.max(hs * fac) } else { hs * fac };
        } else {
            out.steps_rejected += 1;
            h = hs * (0.9 * err.powf(-0.2)).clamp(0.1, 0.5);
            if h < h_min {
                return Err(CoagError::Stiffness { t, h });
            }
        }
    }
    Ok(out)
}

/// Monodisperse initial state `n(e_1) = n0` in `dim` dimensions.
pub fn monodisperse(dim: usize, cap: u64, n0: f64) -> DiscreteState {
    let mut s = DiscreteState::new(dim, cap);
    let mut a = vec![0u32; dim];
    a[0] = 1;
    s.entries.insert(a, n0);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rhs_examples() {
        let sys = DiscreteSystem::new(Kernel::constant(2.0), 1, 16).unwrap();
        let r = rhs(&sys, &monodisperse(1, 16, 1.0)).unwrap();
        assert_eq!(r.rates[&vec![1]], -2.0);
        assert_eq!(r.rates[&vec![2]], 1.0);

        let sys = DiscreteSystem::new(Kernel::constant(1.0), 2, 16).unwrap();
        let mut s = DiscreteState::new(2, 16);
        s.insert(vec![1, 0], 1.0).unwrap();
        s.insert(vec![0, 1], 1.0).unwrap();
        let r = rhs(&sys, &s).unwrap();
        assert_eq!(r.rates[&vec![1, 1]], 1.0);
        assert_eq!(r.rates[&vec![2, 0]], 0.5);

        let empty = rhs(&sys, &DiscreteState::new(2, 16)).unwrap();
        assert!(empty.rates.values().all(|v| *v == 0.0));
        assert_eq!(empty.gel_rate, vec![0.0, 0.0]);
    }

    #[test]
    fn overflow_goes_to_gel() {
        let sys = DiscreteSystem::new(Kernel::constant(2.0), 1, 3).unwrap();
        let mut s = DiscreteState::new(1, 3);
        s.insert(vec![2], 1.0).unwrap();
        let r = rhs(&sys, &s).unwrap();
        assert_eq!(r.gel_rate, vec![4.0]);
        assert_eq!(r.rates[&vec![2]], -2.0);
    }

    #[test]
    fn constant_kernel_closed_form() {
        let sys = DiscreteSystem::new(Kernel::constant(2.0), 1, 128).unwrap();
        let opts = IntegrateOptions {
            record_times: vec![1.0],
            ..Default::default()
        };
        let tr = integrate(&sys, &monodisperse(1, 128, 1.0), 2.0, &opts).unwrap();
        let r = tr.record_at(1.0).unwrap();
        assert!((r.get(&[1]) - 0.25).abs() < 1e-7);
        assert!((r.get(&[2]) - 0.125).abs() < 1e-7);
        assert!((r.moment(0.0) - 0.5).abs() < 1e-7);
        let last = tr.records.last().unwrap();
        assert!((last.moment(0.0) - 1.0 / 3.0).abs() < 1e-7);
        for (m1, g) in tr.dense.m1.iter().zip(&tr.dense.gel) {
            assert!((m1 + g - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn first_drop_interpolates() {
        let t = [0.0, 1.0, 2.0];
        let v = [1.0, 1.0, 0.98];
        assert!((first_drop(&t, &v, 0.01).unwrap() - 1.5).abs() < 1e-12);
        assert!(first_drop(&t, &[1.0, 1.0, 1.0], 0.01).is_none());
    }

    #[test]
    fn cap_must_be_at_least_two() {
        assert!(DiscreteSystem::new(Kernel::constant(1.0), 1, 1).is_err());
    }
}
