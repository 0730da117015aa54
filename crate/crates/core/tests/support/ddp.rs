//! Optimal-control oracles.

use cannula_core::ddp::{cost_to_go_gradients, rcm_error, total_cost, CostWeights, PlanProblem, Trajectory};
use cannula_core::dynamics::{ControlInput, InertiaParams, RigidBodyState, Tangent};
use cannula_core::se3::{exp_so3, rotation_between, BodyVelocity, Pose, Rotation};
use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-s..s),
        rng.random_range(-s..s),
        rng.random_range(-s..s),
    )
}

/// Position-only reach: with zero rotation weights and no initial spin the
/// translational dynamics are linear (torques only enter at second order), so
/// the optimum solves a single regularized least-squares system.
pub fn lqr_batch_oracle(problem: &PlanProblem, weights: &CostWeights) -> Vec<Vector3<f64>> {
    let n = problem.n_traj;
    let dt = problem.dt();
    let m = problem.inertia.mass;
    let r = *problem.x0.pose.r.matrix();
    // p_N = c + G·U with U the stacked body forces.
    let c = problem.x0.pose.p + r * problem.x0.vel.v * (dt * n as f64);
    let mut g = DMatrix::<f64>::zeros(3, 3 * n);
    for j in 0..n {
        // Force j changes velocity from step j onward: (n − j) position steps.
        let block = r * ((n - j) as f64 * dt * dt / m);
        g.view_mut((0, 3 * j), (3, 3)).copy_from(&block);
    }
    let p = DMatrix::from_column_slice(3, 3, weights.p_pf.as_slice());
    let ru = weights.r_u.fixed_view::<3, 3>(0, 0).into_owned();
    let mut h = g.transpose() * &p * &g;
    for j in 0..n {
        let mut blk = h.view_mut((3 * j, 3 * j), (3, 3));
        blk += DMatrix::from_column_slice(3, 3, (ru * dt).as_slice());
    }
    let rhs = g.transpose() * &p * DVector::from_column_slice((problem.p_f - c).as_slice());
    let u = h.cholesky().expect("oracle system is SPD").solve(&rhs);

    let mut positions = vec![problem.x0.pose.p];
    let mut pos = problem.x0.pose.p;
    let mut vel = problem.x0.vel.v;
    for j in 0..n {
        vel += Vector3::new(u[3 * j], u[3 * j + 1], u[3 * j + 2]) * (dt / m);
        pos += r * vel * dt;
        positions.push(pos);
    }
    positions
}

pub fn random_small_problem(rng: &mut ChaCha8Rng) -> (PlanProblem, CostWeights, Trajectory) {
    let n = 3;
    let problem = PlanProblem {
        x0: RigidBodyState::new(
            Pose::new(rand_vec(rng, 1e-3), exp_so3(&rand_vec(rng, 1.0))),
            BodyVelocity::new(rand_vec(rng, 1e-3), rand_vec(rng, 0.5)),
        ),
        p_f: rand_vec(rng, 1e-3),
        r_f: exp_so3(&rand_vec(rng, 1.0)),
        p_rcm: rand_vec(rng, 1e-3) + Vector3::z() * 0.02,
        horizon: 0.1,
        n_traj: n,
        inertia: InertiaParams {
            mass: rng.random_range(0.5..2.0),
            moments: [
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
            ],
        },
    };
    let weights = CostWeights {
        p_pf: Matrix3::identity() * rng.random_range(1.0..1e3),
        p_rf: Matrix3::identity() * rng.random_range(0.1..10.0),
        r_u: Matrix6::identity() * rng.random_range(0.1..2.0),
        w_s: rng.random_range(0.0..1e3),
    };
    let controls = (0..n)
        .map(|_| ControlInput(Vector6::from_iterator((0..6).map(|_| rng.random_range(-1.0..1.0)))))
        .collect();
    let traj = Trajectory::rollout(problem.x0, controls, &problem.inertia, problem.dt());
    (problem, weights, traj)
}

/// Open-loop cost-to-go from step k with state `x` and controls `u_k..`.
pub fn cost_to_go(
    problem: &PlanProblem,
    weights: &CostWeights,
    x: RigidBodyState,
    controls: &[ControlInput],
    dt: f64,
) -> f64 {
    let sub = PlanProblem {
        x0: x,
        n_traj: controls.len(),
        horizon: dt * controls.len() as f64,
        ..problem.clone()
    };
    let t = Trajectory::rollout(x, controls.to_vec(), &problem.inertia, dt);
    total_cost(&sub, weights, &t)
}

pub fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(1e-8)
}

pub fn descent_problem(p_rcm_offset: Vector3<f64>) -> PlanProblem {
    let p0 = Vector3::new(1e-3, -2e-3, 5e-4);
    let p_rcm = p0 + p_rcm_offset;
    let p_f = p0 + Vector3::new(1.5e-4, -1e-4, -4e-5);
    let r0 = rotation_between(&Vector3::z(), &(p_rcm - p0).normalize());
    let r_f = rotation_between(&r0.z_axis(), &(p_rcm - p_f).normalize()).compose(&r0);
    PlanProblem {
        x0: RigidBodyState::at_rest(Pose::new(p0, r0)),
        p_f,
        r_f,
        p_rcm,
        horizon: 64.0 / 30.0,
        n_traj: 64,
        inertia: InertiaParams::default(),
    }
}

pub fn max_rcm(problem: &PlanProblem, traj: &Trajectory) -> f64 {
    traj.states
        .iter()
        .map(|x| rcm_error(&x.pose.p, &x.pose.r, &problem.p_rcm))
        .fold(0.0, f64::max)
}

/// Random reach with zero rotation weights and no RCM term: the case the
/// batch least-squares oracle covers.
pub fn point_mass_problem(rng: &mut ChaCha8Rng) -> (PlanProblem, CostWeights) {
    let r0 = exp_so3(&rand_vec(rng, 0.5));
    let problem = PlanProblem {
        x0: RigidBodyState::new(
            Pose::new(rand_vec(rng, 1e-3), r0),
            BodyVelocity::new(rand_vec(rng, 1e-4), Vector3::zeros()),
        ),
        p_f: rand_vec(rng, 1e-3),
        r_f: Rotation::identity(),
        p_rcm: Vector3::zeros(),
        horizon: 64.0 / 30.0,
        n_traj: 64,
        inertia: InertiaParams {
            mass: rng.random_range(0.5..2.0),
            moments: [1.0, 2.0, 3.0],
        },
    };
    let weights = CostWeights {
        p_rf: Matrix3::zeros(),
        w_s: 0.0,
        ..CostWeights::default()
    };
    (problem, weights)
}

/// Worst relative error of the backward-pass gradients against central
/// differences of the open-loop cost-to-go over `count` random problems.
pub fn worst_gradient_error(seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let (problem, weights, traj) = random_small_problem(&mut rng);
        let grads = cost_to_go_gradients(&problem, &weights, &traj);
        let dt = traj.dt;
        for (k, (qx, qu)) in grads.iter().enumerate() {
            let h = 1e-6;
            let scale = qx.amax().max(qu.amax());
            for i in 0..12 {
                let mut d = Tangent::zeros();
                d[i] = h;
                let f = cost_to_go(&problem, &weights, traj.states[k].plus(&d), &traj.controls[k..], dt);
                let b = cost_to_go(&problem, &weights, traj.states[k].plus(&(-d)), &traj.controls[k..], dt);
                worst = worst.max(rel_err((f - b) / (2.0 * h), qx[i], scale));
            }
            for i in 0..6 {
                let mut cf = traj.controls[k..].to_vec();
                let mut cb = cf.clone();
                cf[0].0[i] += h;
                cb[0].0[i] -= h;
                let f = cost_to_go(&problem, &weights, traj.states[k], &cf, dt);
                let b = cost_to_go(&problem, &weights, traj.states[k], &cb, dt);
                worst = worst.max(rel_err((f - b) / (2.0 * h), qu[i], scale));
            }
        }
    }
    worst
}
