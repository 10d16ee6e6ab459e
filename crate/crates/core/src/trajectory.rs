//! Time-stamped state sequences shared by all solvers and consumed by the
//! certificates.

use serde::{Deserialize, Serialize};

use crate::error::{CoagError, Result};
use crate::kernels::{classify, Classification, EnvelopeParams, GelParams, Homogeneity, Kernel};
use crate::measures::MeasureState;

/// Kernel and run metadata carried alongside the samples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub solver: String,
    pub kernel: String,
    pub envelope: Option<EnvelopeParams>,
    pub gel: Option<GelParams>,
    pub homogeneity: Option<Homogeneity>,
    pub classification: Option<Classification>,
    pub eps: Option<f64>,
    /// Requested output time paired with the index of the sample taken for it.
    pub output_times: Vec<(f64, usize)>,
    pub notes: Vec<String>,
}

impl TrajectoryMeta {
    pub fn for_kernel(solver: &str, kernel: &Kernel) -> Self {
        Self {
            solver: solver.to_string(),
            kernel: kernel.name.clone(),
            envelope: Some(kernel.envelope),
            gel: kernel.gel,
            homogeneity: kernel.homogeneity,
            classification: Some(classify(kernel)),
            ..Default::default()
        }
    }
}

/// Per-window record of the fixed-point iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub t_start: f64,
    pub length: f64,
    pub steps: usize,
    pub iterations: usize,
    /// Successive grid-TV distances between iterates.
    pub distances: Vec<f64>,
    /// Ratios `d_{n+1} / d_n`, omitting pairs at the round-off floor.
    pub ratios: Vec<f64>,
    /// Largest grid-TV distance of any iterate from the window's initial state.
    pub ball_radius: f64,
    /// Theorem window bound evaluated at the window start.
    pub theorem_length: f64,
    pub cells: usize,
}

impl WindowReport {
    /// Largest ratio observed after the first iteration.
    pub fn max_ratio(&self) -> Option<f64> {
        self.ratios.iter().cloned().fold(None, |acc, r| Some(acc.map_or(r, |a: f64| a.max(r))))
    }
}

/// Samples of a run. Times are strictly increasing and the first sample is the
/// (restricted) initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dim: usize,
    pub samples: Vec<MeasureState>,
    /// Cumulative mass vector removed by truncation (cutoff or lattice cap) up to each sample.
    pub flux: Vec<Vec<f64>>,
    /// Cumulative mass vector dropped by support pruning up to each sample.
    pub pruned: Vec<Vec<f64>>,
    pub windows: Vec<WindowReport>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn new(dim: usize, meta: TrajectoryMeta) -> Self {
        Self {
            dim,
            samples: Vec::new(),
            flux: Vec::new(),
            pruned: Vec::new(),
            windows: Vec::new(),
            meta,
        }
    }

    /// Append a sample; time must exceed the previous one.
    pub fn push(&mut self, state: MeasureState, flux: Vec<f64>, pruned: Vec<f64>) -> Result<()> {
        if state.dim != self.dim || flux.len() != self.dim || pruned.len() != self.dim {
            return Err(CoagError::Domain("sample dimension mismatch".into()));
        }
        if let Some(last) = self.samples.last() {
            if state.time <= last.time {
                return Err(CoagError::Domain(format!(
                    "sample times must increase ({} after {})",
                    state.time, last.time
                )));
            }
        }
        self.samples.push(state);
        self.flux.push(flux);
        self.pruned.push(pruned);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.time).collect()
    }

    pub fn horizon(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.time)
    }

    pub fn moment_series(&self, alpha: f64) -> Vec<f64> {
        self.samples.iter().map(|s| s.moment(alpha)).collect()
    }

    pub fn mass_series(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.mass_vector()).collect()
    }

    /// Index of the sample at time `t` (within `tol`), if any.
    pub fn index_at(&self, t: f64, tol: f64) -> Option<usize> {
        self.samples.iter().position(|s| (s.time - t).abs() <= tol)
    }

    /// Sample recorded for a requested output time.
    pub fn at_output(&self, t: f64) -> Option<&MeasureState> {
        self.meta
            .output_times
            .iter()
            .find(|(r, _)| (r - t).abs() <= 1e-12 * (1.0 + t.abs()))
            .map(|(_, i)| &self.samples[*i])
            .or_else(|| self.index_at(t, 1e-9 * (1.0 + t.abs())).map(|i| &self.samples[i]))
    }

    pub fn max_window_ratio(&self) -> Option<f64> {
        self.windows.iter().filter_map(|w| w.max_ratio()).fold(None, |a, r| Some(a.map_or(r, |a: f64| a.max(r))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_enforces_increasing_times() {
        let mut t = Trajectory::new(1, TrajectoryMeta::default());
        let s0 = MeasureState::from_atoms(1, 0.0, [(vec![1.0], 1.0)]).unwrap();
        t.push(s0.clone(), vec![0.0], vec![0.0]).unwrap();
        assert!(t.push(s0, vec![0.0], vec![0.0]).is_err());
        let s1 = MeasureState::from_atoms(1, 0.5, [(vec![2.0], 0.5)]).unwrap();
        t.push(s1, vec![0.0], vec![0.0]).unwrap();
        assert_eq!(t.moment_series(1.0), vec![1.0, 1.0]);
        assert_eq!(t.index_at(0.5, 1e-12), Some(1));
    }
}
