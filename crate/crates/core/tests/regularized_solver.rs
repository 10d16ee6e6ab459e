//! Invariants of the regularized solver along whole trajectories.

use coagsim::diagnostics::{mass_conservation, moment_monotonicity, Status};
use coagsim::kernels::Kernel;
use coagsim::measures::{BinGrid, MeasureState};
use coagsim::regularized::{solve, RegularizationParams, WindowPolicy};
use coagsim::trajectory::Trajectory;
use proptest::prelude::*;

fn params(dim: usize, eps: f64, lattice_cap: f64, window: f64) -> RegularizationParams {
    let mut p = RegularizationParams::new(dim, eps).unwrap();
    p.grid = BinGrid::new(dim, eps).unwrap().with_lattice_cap(lattice_cap).unwrap();
    p.window = WindowPolicy::Fixed(window);
    p.steps_per_window = 16;
    p
}

fn mono() -> MeasureState {
    MeasureState::from_atoms(1, 0.0, vec![(vec![1.0], 1.0)]).unwrap()
}

fn transition_run(horizon: f64) -> Trajectory {
    let mut p = params(1, 1e-3, 64.0, 0.05);
    p.output_times = vec![horizon];
    solve(&Kernel::transition(1.0), &mono(), horizon, &p).unwrap()
}

#[test]
fn number_and_mass_never_increase() {
    let tr = transition_run(2.0);
    let m0 = tr.moment_series(0.0);
    assert!(m0.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    let mass = tr.mass_series();
    assert!(mass.windows(2).all(|w| w[1][0] <= w[0][0] * (1.0 + 1e-12)));
    assert!(m0.last().unwrap() < &0.7);
}

#[test]
fn support_stays_in_the_band() {
    let eps = 0.05;
    let mut p = params(1, eps, 8.0, 0.1);
    p.output_times = vec![3.0];
    let tr = solve(&Kernel::additive(1.0), &mono(), 3.0, &p).unwrap();
    for s in &tr.samples {
        for q in &s.particles {
            let r = q.norm();
            assert!(r >= eps * (1.0 - 1e-12) && r <= 2.0 / eps * (1.0 + 1e-12), "t={} |x|={r}", s.time);
        }
    }
    // Mass reaches the cutoff by t = 3 and is logged as flux.
    assert!(tr.flux.last().unwrap()[0] > 0.0);
}

#[test]
fn transition_moments_are_monotone() {
    let tr = transition_run(2.0);
    for alpha in [-0.5, 0.0, 0.5, 1.0] {
        let c = moment_monotonicity(&tr, alpha, 0.0);
        assert_eq!(c.verdict, Status::Pass, "alpha={alpha} {c:?}");
    }
    assert_eq!(mass_conservation(&tr, 1e-6).verdict, Status::Pass);
}

#[test]
fn weight_moment_is_bounded_by_its_initial_value() {
    let k = Kernel::transition(1.0);
    let w = k.weight_fn();
    let tr = transition_run(2.0);
    let om: Vec<f64> = tr
        .samples
        .iter()
        .map(|s| s.particles.iter().map(|p| p.w * w.at_norm(p.norm())).sum())
        .collect();
    assert!(om.iter().all(|&v| v <= om[0] * (1.0 + 1e-10)));
}

#[test]
fn lattice_data_stays_on_the_lattice() {
    let f0 = MeasureState::from_atoms(2, 0.0, vec![(vec![1.0, 0.0], 0.4), (vec![0.0, 1.0], 0.4), (vec![2.0, 1.0], 0.2)])
        .unwrap();
    let mut p = params(2, 0.05, 40.0, 0.1);
    p.output_times = vec![1.0];
    let tr = solve(&Kernel::constant(2.0), &f0, 1.0, &p).unwrap();
    for s in &tr.samples {
        assert!(s.lattice_defect() <= 1e-12, "t={}", s.time);
    }
}

#[test]
fn refining_eps_approaches_the_untruncated_solution() {
    // K = 2 from monodisperse data: M0(t) = 1/(1+t) without the cutoff.
    let err = |eps: f64| {
        let mut p = params(1, eps, 2.0 / eps, 0.1);
        p.output_times = vec![3.0];
        let tr = solve(&Kernel::constant(2.0), &mono(), 3.0, &p).unwrap();
        (tr.at_output(3.0).unwrap().moment(0.0) - 0.25).abs()
    };
    let (e1, e2, e3) = (err(0.2), err(0.1), err(0.05));
    assert!(e2 < e1 && e3 < e2, "{e1} {e2} {e3}");
}

#[test]
fn constant_kernel_windows_contract() {
    let mut p = params(1, 1e-3, 256.0, 0.1);
    p.window = WindowPolicy::Theorem;
    p.output_times = vec![1.0];
    let tr = solve(&Kernel::constant(2.0), &mono(), 1.0, &p).unwrap();
    let worst = tr.max_window_ratio().unwrap();
    assert!(worst <= 0.55, "{worst}");
    assert!(tr.windows.iter().all(|w| w.ball_radius <= 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn conservative_runs_keep_the_mass_vector(
        atoms in prop::collection::vec(((0u32..4, 0u32..4), 0.05f64..1.0), 1..4),
        c0 in 0.5f64..2.0,
    ) {
        let atoms: Vec<(Vec<f64>, f64)> = atoms
            .into_iter()
            .filter(|((a, b), _)| a + b > 0)
            .map(|((a, b), w)| (vec![a as f64, b as f64], w))
            .collect();
        prop_assume!(!atoms.is_empty());
        let f0 = MeasureState::from_atoms(2, 0.0, atoms).unwrap();
        let mut p = params(2, 0.05, 40.0, 0.1);
        p.output_times = vec![0.5];
        let tr = solve(&Kernel::constant(c0), &f0, 0.5, &p).unwrap();
        let c = mass_conservation(&tr, 1e-6);
        prop_assert_eq!(c.verdict, Status::Pass);
        let m0 = tr.moment_series(0.0);
        prop_assert!(m0.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }
}
