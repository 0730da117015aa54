use cannula_core::ddp::{
    solve, solve_with, total_cost, CostWeights, PlanProblem,
    SolverOptions, Trajectory,
};
use cannula_core::dynamics::ControlInput;
use cannula_core::se3::Rotation;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod support;

use support::ddp::*;

#[test]
fn point_mass_reach_matches_batch_lqr() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let (problem, weights) = point_mass_problem(&mut rng);
        let sol = solve(&problem, &weights, None).unwrap();
        let oracle = lqr_batch_oracle(&problem, &weights);
        let err = sol
            .trajectory
            .states
            .iter()
            .zip(&oracle)
            .map(|(x, p)| (x.pose.p - p).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "state error {err}");
        assert!(sol
            .trajectory
            .controls
            .iter()
            .all(|u| u.torque().amax() < 1e-6));
    }
}

#[test]
fn backward_derivatives_match_central_differences() {
    let worst = worst_gradient_error(42, 50);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn rcm_penalty_keeps_axis_on_pivot() {
    let tilt = Vector3::new(-0.5, 0.0, 0.866) * 0.02;
    let problem = descent_problem(tilt);
    let sol = solve(&problem, &CostWeights::default(), None).unwrap();
    let m = max_rcm(&problem, &sol.trajectory);
    assert!(m < 25e-6, "max rcm error {m}");
    assert!((sol.trajectory.states[64].pose.p - problem.p_f).norm() < 5e-6);
}

#[test]
fn penalty_weight_tightens_rcm() {
    let problem = descent_problem(Vector3::new(0.3, 0.2, 0.93).normalize() * 0.02);
    // Mismatched terminal orientation so the penalty has work to do.
    let problem = PlanProblem {
        r_f: Rotation::rot_x(0.05).compose(&problem.r_f),
        ..problem
    };
    let mut last = f64::INFINITY;
    for w_s in [1e2, 1e3, 1e4] {
        let weights = CostWeights {
            w_s,
            ..CostWeights::default()
        };
        let sol = solve(&problem, &weights, None).unwrap();
        let m = max_rcm(&problem, &sol.trajectory);
        assert!(m <= last * (1.0 + 1e-9), "w_s {w_s}: {m} > {last}");
        last = m;
    }
}

#[test]
fn cost_is_monotone_over_accepted_iterations() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let offset = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 1.0)
            .normalize()
            * 0.02;
        let problem = descent_problem(offset);
        let sol = solve(&problem, &CostWeights::default(), None).unwrap();
        assert!(sol.cost_history.len() >= 2);
        for w in sol.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let zero = Trajectory::rollout(
            problem.x0,
            vec![ControlInput::zero(); 64],
            &problem.inertia,
            problem.dt(),
        );
        assert!(sol.cost <= total_cost(&problem, &CostWeights::default(), &zero));
    }
}

#[test]
fn solution_translates_with_problem() {
    let problem = descent_problem(Vector3::new(-0.5, 0.1, 0.86).normalize() * 0.02);
    let shift = Vector3::new(2e-3, -1e-3, 3e-4);
    let mut moved = problem.clone();
    moved.x0.pose.p += shift;
    moved.p_f += shift;
    moved.p_rcm += shift;
    let a = solve(&problem, &CostWeights::default(), None).unwrap();
    let b = solve(&moved, &CostWeights::default(), None).unwrap();
    assert_eq!(a.trajectory.len(), b.trajectory.len());
    for (xa, xb) in a.trajectory.states.iter().zip(&b.trajectory.states) {
        assert!((xb.pose.p - xa.pose.p - shift).norm() < 1e-9);
        assert!((xb.pose.r.matrix() - xa.pose.r.matrix()).amax() < 1e-9);
    }
}

#[test]
fn iteration_cap_reports_best_so_far() {
    let problem = descent_problem(Vector3::new(0.0, 0.0, 0.02));
    let opts = SolverOptions {
        max_iters: 1,
        ..SolverOptions::default()
    };
    match solve_with(&problem, &CostWeights::default(), None, &opts) {
        Err(cannula_core::ddp::PlanError::NotConverged { best }) => {
            assert_eq!(best.iterations, 1);
            assert!(best.trajectory.consistency_error(&problem.inertia) < 1e-9);
        }
        Ok(sol) => assert!(sol.iterations <= 1),
        Err(e) => panic!("unexpected {e}"),
    }
}

#[test]
fn warm_start_never_hurts() {
    let problem = descent_problem(Vector3::new(0.2, 0.0, 1.0).normalize() * 0.02);
    let cold = solve(&problem, &CostWeights::default(), None).unwrap();
    let warm = solve(&problem, &CostWeights::default(), Some(&cold.trajectory)).unwrap();
    assert!(warm.cost <= cold.cost * (1.0 + 1e-9));
    assert!(warm.iterations <= cold.iterations);
}
