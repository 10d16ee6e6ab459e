//! Marcus–Lushnikov ensembles against the deterministic lattice solution.

use coagsim::discrete::{integrate, monodisperse, DiscreteSystem, IntegrateOptions};
use coagsim::kernels::Kernel;
use coagsim::measures::MeasureState;
use coagsim::stochastic::{compare, simulate, simulate_ensemble, McOptions, Observable};
use coagsim::trajectory::Trajectory;

const TIMES: [f64; 3] = [0.25, 0.5, 1.0];

fn reference(kernel: Kernel) -> Trajectory {
    let sys = DiscreteSystem::new(kernel, 1, 256).unwrap();
    let opts = IntegrateOptions { rtol: 1e-10, record_times: TIMES.to_vec(), ..Default::default() };
    integrate(&sys, &monodisperse(1, 256, 1.0), 1.0, &opts).unwrap().to_trajectory().unwrap()
}

fn mono() -> MeasureState {
    MeasureState::from_atoms(1, 0.0, vec![(vec![1.0], 1.0)]).unwrap()
}

#[test]
fn ensemble_agrees_with_the_lattice_solution() {
    let opts = McOptions::new(20_000, 32, 7, TIMES.to_vec());
    let ens = simulate_ensemble(&Kernel::constant(2.0), &mono(), 1.0, &opts).unwrap();
    let obs = [Observable::M0, Observable::M1, Observable::Atom(vec![1.0]), Observable::Atom(vec![2.0])];
    let rep = compare(&ens, &reference(Kernel::constant(2.0)), &obs).unwrap();
    // t = 0 is shared as well.
    assert_eq!(rep.rows.len(), obs.len() * (TIMES.len() + 1));
    assert!(rep.max_abs_z <= 4.0, "max |z| = {}", rep.max_abs_z);
}

#[test]
fn mismatched_kernel_is_detected() {
    let opts = McOptions::new(20_000, 16, 11, TIMES.to_vec());
    let ens = simulate_ensemble(&Kernel::constant(1.0), &mono(), 1.0, &opts).unwrap();
    let rep = compare(&ens, &reference(Kernel::constant(2.0)), &[Observable::M0]).unwrap();
    assert!(rep.max_abs_z > 10.0, "max |z| = {}", rep.max_abs_z);
}

#[test]
fn empirical_number_is_count_over_n() {
    let n = 5_000;
    let rep = simulate(&Kernel::constant(2.0), &mono(), n, 1.0, 3, &TIMES).unwrap();
    for s in &rep.trajectory.samples {
        let count = s.particles.len();
        assert!(count >= 1);
        let total: f64 = s.particles.iter().map(|p| p.w).sum();
        // Particles with equal coordinates are grouped; their weights add.
        assert!((s.moment(1.0) - 1.0).abs() < 1e-12);
        assert!(total <= 1.0 + 1e-12);
        let per = 1.0 / n as f64;
        let k = (total / per).round();
        assert!((total - k * per).abs() < 1e-9);
    }
    assert!(rep.stats.max_acceptance <= 1.0 + 1e-12);
    assert!(rep.stats.events > 0 && rep.stats.events < n as u64);
}

#[test]
fn replica_seeds_make_ensembles_reproducible() {
    let opts = McOptions::new(2_000, 4, 99, TIMES.to_vec());
    let a = simulate_ensemble(&Kernel::additive(1.0), &mono(), 1.0, &opts).unwrap();
    let b = simulate_ensemble(&Kernel::additive(1.0), &mono(), 1.0, &opts).unwrap();
    for (x, y) in a.replicas.iter().zip(&b.replicas) {
        assert_eq!(x.trajectory, y.trajectory);
        assert_eq!(x.stats.events, y.stats.events);
    }
    assert_ne!(a.replicas[0].trajectory, a.replicas[1].trajectory);
}
