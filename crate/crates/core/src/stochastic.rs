//! Marcus-Lushnikov stochastic coalescent.
//!
//! `N` particles; each unordered pair merges at rate `K(x_i, x_j) / N`. Events
//! are drawn by thinning the majorant `2 c2 w(x_i) w(x_j) / N`: a candidate
//! ordered pair is sampled proportionally to `w_i w_j` from a sum tree and
//! accepted with probability `K / (2 c2 w_i w_j)`. The empirical measure gives
//! each particle weight `M0(f0) / N`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoagError, Result};
use crate::kernels::{norm1, Kernel, WeightFn};
use crate::measures::{MeasureState, Particle};
use crate::trajectory::{Trajectory, TrajectoryMeta};

/// Binary tree of partial sums over nonnegative leaf values.
#[derive(Debug, Clone)]
pub struct SumTree {
    size: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(n: usize) -> Self {
        let size = n.next_power_of_two().max(1);
        Self {
            size,
            nodes: vec![0.0; 2 * size],
        }
    }

    pub fn from_values(values: &[f64]) -> Self {
        let mut t = Self::new(values.len());
        t.nodes[t.size..t.size + values.len()].copy_from_slice(values);
        for i in (1..t.size).rev() {
            t.nodes[i] = t.nodes[2 * i] + t.nodes[2 * i + 1];
        }
        t
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.size + i]
    }

    /// Set leaf `i`; parents are recomputed from their children, so no drift accumulates.
    pub fn set(&mut self, i: usize, v: f64) {
        let mut k = self.size + i;
        self.nodes[k] = v;
        while k > 1 {
            k /= 2;
            self.nodes[k] = self.nodes[2 * k] + self.nodes[2 * k + 1];
        }
    }

    /// Leaf whose cumulative interval contains `u` in `[0, total)`.
    pub fn find(&self, mut u: f64) -> usize {
        let mut k = 1;
        while k < self.size {
            let left = self.nodes[2 * k];
            if u < left || self.nodes[2 * k + 1] == 0.0 {
                k *= 2;
            } else {
                u -= left;
                k = 2 * k + 1;
            }
        }
        k - self.size
    }
}

/// splitmix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replica `r`: `splitmix64(master ^ r)`.
pub fn replica_seed(master: u64, replica: u64) -> u64 {
    splitmix64(master ^ replica)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McOptions {
    pub n: usize,
    pub replicas: usize,
    pub seed: u64,
    pub record_times: Vec<f64>,
    /// Gel flag threshold on the largest particle's mass fraction.
    pub gel_fraction: f64,
}

impl McOptions {
    pub fn new(n: usize, replicas: usize, seed: u64, record_times: Vec<f64>) -> Self {
        Self {
            n,
            replicas,
            seed,
            record_times,
            gel_fraction: 0.01,
        }
    }
}

/// Per-replica counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplicaStats {
    pub seed: u64,
    pub events: u64,
    pub proposals: u64,
    pub max_acceptance: f64,
    /// Events whose coordinate sums were not exact in floating point.
    pub inexact_events: u64,
    /// Largest-particle mass fraction at each record.
    pub largest_fraction: Vec<f64>,
    /// Waiting time of the first event (infinite when none occurred).
    pub first_event: f64,
}

#[derive(Debug, Clone)]
pub struct Replica {
    pub trajectory: Trajectory,
    pub stats: ReplicaStats,
}

struct Ensemble {
    dim: usize,
    x: Vec<f64>,
    w: Vec<f64>,
}

impl Ensemble {
    fn len(&self) -> usize {
        self.w.len()
    }

    fn pos(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    fn remove(&mut self, i: usize, tree: &mut SumTree) {
        let last = self.len() - 1;
        if i != last {
            let d = self.dim;
            for k in 0..d {
                self.x[i * d + k] = self.x[last * d + k];
            }
            self.w[i] = self.w[last];
            tree.set(i, self.w[i]);
        }
        tree.set(last, 0.0);
        self.x.truncate(last * self.dim);
        self.w.pop();
    }

    fn snapshot(&self, time: f64, weight: f64) -> MeasureState {
        let mut cells: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
        for i in 0..self.len() {
            let key = self.pos(i).iter().map(|v| v.to_bits()).collect();
            *cells.entry(key).or_insert(0) += 1;
        }
        MeasureState {
            dim: self.dim,
            time,
            particles: cells
                .into_iter()
                .map(|(k, c)| Particle {
                    x: k.into_iter().map(f64::from_bits).collect(),
                    w: c as f64 * weight,
                })
                .collect(),
        }
    }

    fn largest_fraction(&self) -> f64 {
        let mut total = 0.0;
        let mut best = 0.0f64;
        for i in 0..self.len() {
            let r = norm1(self.pos(i));
            total += r;
            best = best.max(r);
        }
        if total > 0.0 {
            best / total
        } else {
            0.0
        }
    }
}

/// Draw `n` i.i.d. compositions from the normalized initial measure.
pub fn sample_initial<R: Rng>(f0: &MeasureState, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let total = f0.total_weight();
    if f0.is_empty() || !(total > 0.0) {
        return Err(CoagError::Domain("initial measure is empty".into()));
    }
    let cdf: Vec<f64> = f0
        .particles
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p.w / total;
            Some(*acc)
        })
        .collect();
    Ok((0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            let idx = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            f0.particles[idx].x.clone()
        })
        .collect())
}

/// One replica of the particle system.
pub fn simulate(
    kernel: &Kernel,
    f0: &MeasureState,
    n: usize,
    horizon: f64,
    seed: u64,
    record_times: &[f64],
) -> Result<Replica> {
    if n < 2 {
        return Err(CoagError::Parameter("need at least two particles".into()));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(CoagError::Parameter("horizon must be finite and nonnegative".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dim = f0.dim;
    let draws = sample_initial(f0, n, &mut rng)?;
    let wf: WeightFn = kernel.weight_fn();
    let c2 = kernel.envelope.c2;
    let mut ens = Ensemble {
        dim,
        x: draws.iter().flatten().cloned().collect(),
        w: draws.iter().map(|x| wf.at_norm(norm1(x))).collect(),
    };
    let mut tree = SumTree::from_values(&ens.w);
    let weight = f0.total_weight() / n as f64;

    let mut records: Vec<f64> = record_times.iter().cloned().filter(|&t| t > 0.0 && t <= horizon).collect();
    records.push(horizon);
    records.sort_by(|a, b| a.partial_cmp(b).unwrap());
    records.dedup();

    let mut meta = TrajectoryMeta::for_kernel("montecarlo", kernel);
    meta.notes.push(format!("N = {n}, seed = {seed}"));
    let mut traj = Trajectory::new(dim, meta);
    let zero = vec![0.0; dim];
    traj.push(ens.snapshot(0.0, weight), zero.clone(), zero.clone())?;
    let mut stats = ReplicaStats {
        seed,
        largest_fraction: vec![ens.largest_fraction()],
        first_event: f64::INFINITY,
        ..Default::default()
    };

    let mut t = 0.0;
    let mut next = 0;
    let mut merged = vec![0.0; dim];
    while next < records.len() {
        let s = tree.total();
        let rate = c2 * s * s / n as f64;
        let wait = if rate > 0.0 && ens.len() >= 2 {
            -(1.0 - rng.gen::<f64>()).ln() / rate
        } else {
            f64::INFINITY
        };
        while next < records.len() && t + wait > records[next] {
            let rt = records[next];
            if rt > 0.0 {
                traj.push(ens.snapshot(rt, weight), zero.clone(), zero.clone())?;
                stats.largest_fraction.push(ens.largest_fraction());
            }
            next += 1;
        }
        if next >= records.len() {
            break;
        }
        t += wait;
        stats.proposals += 1;
        let i = tree.find(rng.gen::<f64>() * s);
        let j = tree.find(rng.gen::<f64>() * s);
        if i == j || i >= ens.len() || j >= ens.len() {
            continue;
        }
        let (wi, wj) = (ens.w[i], ens.w[j]);
        let k = kernel.rate(ens.pos(i), ens.pos(j));
        let ratio = k / (2.0 * c2 * wi * wj);
        if ratio > 1.0 + 1e-12 {
            return Err(CoagError::Majorant {
                ratio,
                x: norm1(ens.pos(i)),
                y: norm1(ens.pos(j)),
            });
        }
        stats.max_acceptance = stats.max_acceptance.max(ratio);
        if rng.gen::<f64>() >= ratio {
            continue;
        }
        let mut exact = true;
        for kk in 0..dim {
            let (a, b) = (ens.x[i * dim + kk], ens.x[j * dim + kk]);
            merged[kk] = a + b;
            exact &= merged[kk] - a == b && merged[kk] - b == a;
        }
        if !exact {
            stats.inexact_events += 1;
        }
        debug_assert!(
            exact || ens.pos(i).iter().chain(ens.pos(j)).any(|v| v.fract() != 0.0),
            "integral compositions must merge without rounding"
        );
        if stats.events == 0 {
            stats.first_event = t;
        }
        stats.events += 1;
        let (keep, drop) = (i.min(j), i.max(j));
        for kk in 0..dim {
            ens.x[keep * dim + kk] = merged[kk];
        }
        ens.w[keep] = wf.at_norm(norm1(&merged));
        tree.set(keep, ens.w[keep]);
        ens.remove(drop, &mut tree);
    }
    Ok(Replica { trajectory: traj, stats })
}

/// Replicas run concurrently; results are collected in replica order.
#[derive(Debug, Clone)]
pub struct McEnsemble {
    pub replicas: Vec<Replica>,
    pub options: McOptions,
}

pub fn simulate_ensemble(kernel: &Kernel, f0: &MeasureState, horizon: f64, opts: &McOptions) -> Result<McEnsemble> {
    if opts.replicas == 0 {
        return Err(CoagError::Parameter("need at least one replica".into()));
    }
    let replicas = (0..opts.replicas as u64)
        .into_par_iter()
        .map(|r| simulate(kernel, f0, opts.n, horizon, replica_seed(opts.seed, r), &opts.record_times))
        .collect::<Result<Vec<_>>>()?;
    Ok(McEnsemble {
        replicas,
        options: opts.clone(),
    })
}

impl McEnsemble {
    pub fn times(&self) -> Vec<f64> {
        self.replicas[0].trajectory.times()
    }

    /// Mean and standard error over replicas of an observable at each record.
    pub fn observable<F: Fn(&MeasureState) -> f64>(&self, f: F) -> Vec<(f64, f64)> {
        let r = self.replicas.len() as f64;
        let n = self.replicas[0].trajectory.len();
        (0..n)
            .map(|k| {
                let vals: Vec<f64> = self.replicas.iter().map(|rep| f(&rep.trajectory.samples[k])).collect();
                let mean = vals.iter().sum::<f64>() / r;
                let var = if r > 1.0 {
                    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0)
                } else {
                    0.0
                };
                (mean, (var / r).sqrt())
            })
            .collect()
    }

    /// Replica-averaged empirical measure at every record.
    pub fn pooled(&self) -> Result<Trajectory> {
        let first = &self.replicas[0].trajectory;
        let mut meta = first.meta.clone();
        meta.notes = vec![format!(
            "pooled over {} replicas, N = {}, master seed {}",
            self.replicas.len(),
            self.options.n,
            self.options.seed
        )];
        let mut out = Trajectory::new(first.dim, meta);
        let scale = 1.0 / self.replicas.len() as f64;
        for k in 0..first.len() {
            let mut cells: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
            for rep in &self.replicas {
                for p in &rep.trajectory.samples[k].particles {
                    *cells.entry(p.x.iter().map(|v| v.to_bits()).collect()).or_insert(0.0) += p.w * scale;
                }
            }
            let state = MeasureState {
                dim: first.dim,
                time: first.samples[k].time,
                particles: cells
                    .into_iter()
                    .map(|(key, w)| Particle {
                        x: key.into_iter().map(f64::from_bits).collect(),
                        w,
                    })
                    .collect(),
            };
            out.push(state, vec![0.0; first.dim], vec![0.0; first.dim])?;
        }
        let times = out.times();
        out.meta.output_times = times.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        Ok(out)
    }

    /// Record indices at which the mean largest-particle fraction exceeds the
    /// gel threshold from that point on.
    pub fn gel_flag_time(&self) -> Option<f64> {
        let times = self.times();
        let n = times.len();
        let mean: Vec<f64> = (0..n)
            .map(|k| {
                self.replicas.iter().map(|r| r.stats.largest_fraction[k]).sum::<f64>() / self.replicas.len() as f64
            })
            .collect();
        (0..n)
            .find(|&k| mean[k..].iter().all(|&f| f > self.options.gel_fraction))
            .map(|k| times[k])
    }
}

/// Observables compared between an ensemble and a deterministic trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Observable {
    M0,
    M1,
    /// Weight at an exact composition.
    Atom(Vec<f64>),
}

impl Observable {
    pub fn name(&self) -> String {
        match self {
            Observable::M0 => "M0".into(),
            Observable::M1 => "M1".into(),
            Observable::Atom(x) => format!("n{x:?}"),
        }
    }

    pub fn eval(&self, s: &MeasureState) -> f64 {
        match self {
            Observable::M0 => s.total_weight(),
            Observable::M1 => s.moment(1.0),
            Observable::Atom(x) => s.particles.iter().filter(|p| &p.x == x).map(|p| p.w).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub time: f64,
    pub observable: String,
    pub empirical: f64,
    pub stderr: f64,
    pub deterministic: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub rows: Vec<Deviation>,
    pub max_abs_z: f64,
}

/// z-scores of the ensemble against `deterministic` at shared record times.
pub fn compare(empirical: &McEnsemble, deterministic: &Trajectory, observables: &[Observable]) -> Result<DeviationReport> {
    let times = empirical.times();
    let mut rows = Vec::new();
    for obs in observables {
        let stats = empirical.observable(|s| obs.eval(s));
        for (k, &t) in times.iter().enumerate() {
            let Some(idx) = deterministic.index_at(t, 1e-9 * (1.0 + t)) else {
                continue;
            };
            let det = obs.eval(&deterministic.samples[idx]);
            let (mean, se) = stats[k];
            let diff = mean - det;
            // conserved observables agree to round-off with round-off spread
            let z = if diff.abs() <= 1e-12 * mean.abs().max(det.abs()) {
                0.0
            } else if se > 0.0 {
                diff / se
            } else {
                f64::INFINITY.copysign(diff)
            };
            rows.push(Deviation {
                time: t,
                observable: obs.name(),
                empirical: mean,
                stderr: se,
                deterministic: det,
                z,
            });
        }
    }
    if rows.is_empty() {
        return Err(CoagError::NoSharedTimes);
    }
    let max_abs_z = rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
    Ok(DeviationReport { rows, max_abs_z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::EnvelopeParams;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn mono() -> MeasureState {
        MeasureState::from_atoms(1, 0.0, [(vec![1.0], 1.0)]).unwrap()
    }

    #[test]
    fn sum_tree_find_and_update() {
        let mut t = SumTree::from_values(&[1.0, 2.0, 3.0]);
        assert_eq!(t.total(), 6.0);
        assert_eq!(t.find(0.5), 0);
        assert_eq!(t.find(1.5), 1);
        assert_eq!(t.find(5.9), 2);
        t.set(1, 0.0);
        assert_eq!(t.total(), 4.0);
        assert_eq!(t.find(1.5), 2);
    }

    #[test]
    fn two_particle_waiting_time_has_mean_one() {
        let k = Kernel::constant(2.0);
        let reps = 100_000u64;
        let total: f64 = (0..reps)
            .map(|r| simulate(&k, &mono(), 2, 1e6, replica_seed(7, r), &[]).unwrap().stats.first_event)
            .sum();
        let mean = total / reps as f64;
        // standard error of the mean is ~0.0032
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn zero_kernel_has_no_events() {
        let env = EnvelopeParams::uniform(0.0, 0.0, 0.0, 0.0).unwrap();
        let k = Kernel::custom("zero", env, Arc::new(|_: &[f64], _: &[f64]| 0.0)).unwrap();
        let r = simulate(&k, &mono(), 100, 5.0, 1, &[1.0]).unwrap();
        assert_eq!(r.stats.events, 0);
        assert!(r.trajectory.samples.iter().all(|s| s.total_weight() == 1.0));
    }

    #[test]
    fn same_seed_same_history() {
        let k = Kernel::additive(1.0);
        let a = simulate(&k, &mono(), 500, 1.0, 42, &[0.5]).unwrap();
        let b = simulate(&k, &mono(), 500, 1.0, 42, &[0.5]).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.stats, b.stats);
    }

    #[test]
    fn majorant_violation_is_reported() {
        let env = EnvelopeParams::uniform(0.0, 0.0, 0.0, 1.0).unwrap();
        let k = Kernel::custom("liar", env, Arc::new(|_: &[f64], _: &[f64]| 5.0)).unwrap();
        assert!(matches!(simulate(&k, &mono(), 10, 1.0, 1, &[]), Err(CoagError::Majorant { .. })));
    }

    #[test]
    fn identical_trajectories_give_zero_z() {
        let k = Kernel::constant(1.0);
        let r = simulate(&k, &mono(), 100, 1.0, 3, &[0.5]).unwrap();
        let ens = McEnsemble {
            replicas: vec![r.clone(), r.clone()],
            options: McOptions::new(100, 2, 3, vec![0.5]),
        };
        let rep = compare(&ens, &r.trajectory, &[Observable::M0, Observable::M1]).unwrap();
        assert!(rep.rows.iter().all(|row| row.z == 0.0));
    }

    #[test]
    fn no_shared_times_is_an_error() {
        let k = Kernel::constant(1.0);
        let r = simulate(&k, &mono(), 10, 1.0, 3, &[]).unwrap();
        let ens = McEnsemble {
            replicas: vec![r],
            options: McOptions::new(10, 1, 3, vec![]),
        };
        let mut other = Trajectory::new(1, TrajectoryMeta::default());
        other.push(MeasureState { time: 7.0, ..mono() }, vec![0.0], vec![0.0]).unwrap();
        assert!(matches!(compare(&ens, &other, &[Observable::M0]), Err(CoagError::NoSharedTimes)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn events_conserve_mass_and_count(seed in 0u64..1000, n in 2usize..300) {
            let k = Kernel::additive(1.0);
            let f0 = MeasureState::from_atoms(2, 0.0, [(vec![1.0, 0.0], 0.5), (vec![0.0, 2.0], 0.5)]).unwrap();
            let r = simulate(&k, &f0, n, 2.0, seed, &[0.5, 1.0]).unwrap();
            prop_assert_eq!(r.stats.inexact_events, 0);
            prop_assert!(r.stats.max_acceptance <= 1.0);
            let m_start = r.trajectory.samples[0].mass_vector();
            for s in &r.trajectory.samples {
                let m = s.mass_vector();
                for (a, b) in m.iter().zip(&m_start) {
                    prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
                }
            }
            let last = r.trajectory.samples.last().unwrap();
            let count = (last.total_weight() * n as f64).round() as u64;
            prop_assert_eq!(count + r.stats.events, n as u64);
        }
    }
}
