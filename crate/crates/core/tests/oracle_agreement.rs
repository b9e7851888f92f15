//! The lattice solver and the nodal 1-D oracle discretize the same ε-stage
//! equation; their metrics agree to second order once the lattice metric is
//! averaged onto link midpoints.

use std::f64::consts::TAU;

use harmonic_core::bundle::{ConnectionField, MetricField};
use harmonic_core::continuity::{newton_stage, SolverConfig};
use harmonic_core::grid::GridManifold;
use harmonic_core::linalg::{frob, identity};
use harmonic_core::oracle::{oracle_solve, OracleConfig, OracleOutcome, OracleProblem};
use harmonic_core::random::{self, Symmetry};

fn gap(n: usize, seed: u64, eps: f64) -> f64 {
    let grid = GridManifold::circle(n, TAU).unwrap();
    let mut rng = random::rng(seed);
    let a = random::smooth_field(&mut rng, &grid, 2, 2, 0.5, Symmetry::General);
    let conn = ConnectionField::new(grid, 2, vec![a.clone()], None).unwrap();
    let k = MetricField::identity(n, 2);
    let stage = newton_stage(&conn, &k, &vec![identity(2); n], eps, &SolverConfig::default()).unwrap();
    assert!(stage.converged);
    let p = OracleProblem::new(TAU, a, eps).unwrap();
    let OracleOutcome::Solved { h, residual, .. } = oracle_solve(&p, &k, &OracleConfig::default()).unwrap() else {
        panic!("oracle diverged at N = {n}");
    };
    assert!(residual < 1e-9);
    (0..n)
        .map(|j| {
            let mid = (stage.h.get(j) + stage.h.get((j + 1) % n)) * harmonic_core::linalg::c(0.5, 0.0);
            frob(&(mid - h.get(j)))
        })
        .fold(0.0, f64::max)
}

#[test]
fn oracle_and_lattice_solver_agree_to_second_order() {
    for (seed, eps) in [(9, 0.5), (3, 0.25)] {
        let errs: Vec<f64> = [32, 64, 128].iter().map(|&n| gap(n, seed, eps)).collect();
        let orders: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
        // constant C in err ≈ C h², from the finest pair
        let h = TAU / 128.0;
        let c_fit = errs[2] / (h * h);
        println!("seed {seed} eps {eps}: errors {errs:?}, orders {orders:?}, C = {c_fit:.3}");
        assert!(orders.iter().all(|&p| p > 1.8), "{orders:?}");
        assert!(errs[0] < c_fit * 1.5 * (TAU / 32.0).powi(2));
    }
}
