//! RCM-penalized trajectory optimization by differential dynamic programming.
//!
//! The total cost is
//! `½‖p_N − p_f‖²_P + ½‖log(R_fᵀR_N)‖²_P + Σ dt·(½uᵀR_u u + w_s‖e_rcm‖²)`
//! where `e_rcm` is the component of `p_rcm − p` orthogonal to the tool axis.
//! The backward pass uses exact first derivatives and Gauss-Newton second
//! derivatives of each residual in the local chart of [`crate::dynamics`].

use std::fmt::Write as _;

use nalgebra::{Matrix3, Matrix6, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    step, step_jacobians, ControlInput, InertiaParams, RigidBodyState, StateMatrix, Tangent,
    CONTROL_DIM, STATE_DIM,
};
use crate::se3::{hat3, log_so3, right_jacobian_inv_so3, Rotation};

type GainMatrix = SMatrix<f64, CONTROL_DIM, STATE_DIM>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanProblem {
    pub x0: RigidBodyState,
    pub p_f: Vector3<f64>,
    pub r_f: Rotation,
    pub p_rcm: Vector3<f64>,
    /// `t_f − t_0` in seconds.
    pub horizon: f64,
    pub n_traj: usize,
    pub inertia: InertiaParams,
}

impl PlanProblem {
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_traj as f64
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.n_traj < 2 {
            return Err(PlanError::InvalidProblem(format!(
                "n_traj must be at least 2, got {}",
                self.n_traj
            )));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(PlanError::InvalidProblem(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        self.inertia
            .validate()
            .map_err(|e| PlanError::InvalidProblem(e.to_string()))?;
        if !self.x0.is_finite() || !self.p_f.iter().chain(self.p_rcm.iter()).all(|v| v.is_finite())
        {
            return Err(PlanError::InvalidProblem("non-finite problem data".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub p_pf: Matrix3<f64>,
    pub p_rf: Matrix3<f64>,
    pub r_u: Matrix6<f64>,
    pub w_s: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            p_pf: Matrix3::identity() * 1e6,
            p_rf: Matrix3::identity() * 1e2,
            r_u: Matrix6::identity(),
            w_s: 1e4,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<(), PlanError> {
        let psd = |m: &Matrix3<f64>| {
            let s = m.symmetric_eigenvalues();
            (m - m.transpose()).amax() <= 1e-9 * (1.0 + m.amax()) && s.iter().all(|e| *e >= -1e-12)
        };
        if !psd(&self.p_pf) || !psd(&self.p_rf) {
            return Err(PlanError::InvalidProblem(
                "terminal gains must be symmetric positive semidefinite".into(),
            ));
        }
        if self.r_u.cholesky().is_none() || (self.r_u - self.r_u.transpose()).amax() > 1e-9 {
            return Err(PlanError::InvalidProblem(
                "control gain must be symmetric positive definite".into(),
            ));
        }
        if !(self.w_s >= 0.0 && self.w_s.is_finite()) {
            return Err(PlanError::InvalidProblem(format!(
                "w_s must be non-negative, got {}",
                self.w_s
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<RigidBodyState>,
    pub controls: Vec<ControlInput>,
    pub dt: f64,
}

impl Trajectory {
    pub fn rollout(
        x0: RigidBodyState,
        controls: Vec<ControlInput>,
        inertia: &InertiaParams,
        dt: f64,
    ) -> Trajectory {
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(x0);
        for u in &controls {
            let next = step(states.last().unwrap(), u, inertia, dt);
            states.push(next);
        }
        Trajectory {
            states,
            controls,
            dt,
        }
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    /// Largest chart distance between a stored state and the re-integrated one.
    pub fn consistency_error(&self, inertia: &InertiaParams) -> f64 {
        self.controls
            .iter()
            .enumerate()
            .map(|(k, u)| {
                step(&self.states[k], u, inertia, self.dt)
                    .minus(&self.states[k + 1])
                    .amax()
            })
            .fold(0.0, f64::max)
    }

    /// Warm start for a re-solve one step later: controls advanced by one,
    /// final control zeroed, re-integrated from `x0`.
    pub fn shifted(&self, x0: RigidBodyState, inertia: &InertiaParams) -> Trajectory {
        let mut controls: Vec<ControlInput> = self.controls.iter().skip(1).copied().collect();
        controls.push(ControlInput::zero());
        Trajectory::rollout(x0, controls, inertia, self.dt)
    }

    /// Plain-text table, one row per step:
    /// `t px py pz qw qx qy qz vx vy vz wx wy wz u1 .. u6`.
    /// The final row carries zero controls.
    pub fn to_table(&self) -> String {
        let mut out = String::from(
            "# t px py pz qw qx qy qz vx vy vz wx wy wz u1 u2 u3 u4 u5 u6\n",
        );
        for (k, x) in self.states.iter().enumerate() {
            let u = self.controls.get(k).copied().unwrap_or_default();
            let q = x.pose.r.to_quaternion();
            let mut fields = vec![k as f64 * self.dt];
            fields.extend(x.pose.p.iter());
            fields.extend(q.iter());
            fields.extend(x.vel.v.iter());
            fields.extend(x.vel.w.iter());
            fields.extend(u.0.iter());
            let row: Vec<String> = fields.iter().map(|f| format!("{f:.12e}")).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub tol_rel: f64,
    pub mu_init: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    pub line_search_steps: u32,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iters: 100,
            tol_rel: 1e-6,
            mu_init: 1e-6,
            mu_min: 1e-9,
            mu_max: 1e10,
            line_search_steps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub trajectory: Trajectory,
    pub cost: f64,
    pub iterations: usize,
    /// Cost after each accepted iterate, starting with the initial rollout.
    pub cost_history: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid plan problem: {0}")]
    InvalidProblem(String),
    #[error("rollout produced a non-finite cost")]
    NonFiniteCost,
    #[error("no convergence after {} iterations (cost {})", .best.iterations, .best.cost)]
    NotConverged { best: Box<Solution> },
}

/// `(I − r_z r_zᵀ)(p_rcm − p)`.
pub fn rcm_residual(p: &Vector3<f64>, r: &Rotation, p_rcm: &Vector3<f64>) -> Vector3<f64> {
    let rz = r.z_axis();
    let d = p_rcm - p;
    d - rz * rz.dot(&d)
}

/// Distance from `p_rcm` to the tool axis line, in meters.
pub fn rcm_error(p: &Vector3<f64>, r: &Rotation, p_rcm: &Vector3<f64>) -> f64 {
    rcm_residual(p, r, p_rcm).norm()
}

/// Integrand of the running cost (not multiplied by dt).
pub fn running_cost(
    x: &RigidBodyState,
    u: &ControlInput,
    weights: &CostWeights,
    p_rcm: &Vector3<f64>,
) -> f64 {
    0.5 * u.0.dot(&(weights.r_u * u.0))
        + weights.w_s * rcm_residual(&x.pose.p, &x.pose.r, p_rcm).norm_squared()
}

pub fn terminal_cost(x: &RigidBodyState, problem: &PlanProblem, weights: &CostWeights) -> f64 {
    let ep = x.pose.p - problem.p_f;
    let er = log_so3(&problem.r_f.transpose().compose(&x.pose.r));
    0.5 * ep.dot(&(weights.p_pf * ep)) + 0.5 * er.dot(&(weights.p_rf * er))
}

pub fn total_cost(problem: &PlanProblem, weights: &CostWeights, traj: &Trajectory) -> f64 {
    let running: f64 = traj
        .controls
        .iter()
        .zip(&traj.states)
        .map(|(u, x)| running_cost(x, u, weights, &problem.p_rcm))
        .sum();
    running * traj.dt + terminal_cost(traj.states.last().unwrap(), problem, weights)
}

struct RunningDerivatives {
    lx: Tangent,
    lu: Vector6<f64>,
    lxx: StateMatrix,
    luu: Matrix6<f64>,
}

/// dt-scaled running-cost derivatives at `(x, u)`.
fn running_derivatives(
    x: &RigidBodyState,
    u: &ControlInput,
    weights: &CostWeights,
    p_rcm: &Vector3<f64>,
    dt: f64,
) -> RunningDerivatives {
    let r = *x.pose.r.matrix();
    let rz = x.pose.r.z_axis();
    let d = p_rcm - x.pose.p;
    let e = d - rz * rz.dot(&d);
    let mut de = SMatrix::<f64, 3, STATE_DIM>::zeros();
    de.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(rz * rz.transpose() - Matrix3::identity()));
    let de_dth =
        (Matrix3::identity() * rz.dot(&d) + rz * d.transpose()) * r * hat3(&Vector3::z());
    de.fixed_view_mut::<3, 3>(0, 3).copy_from(&de_dth);

    let ws = 2.0 * weights.w_s * dt;
    RunningDerivatives {
        lx: de.transpose() * e * ws,
        lu: weights.r_u * u.0 * dt,
        lxx: de.transpose() * de * ws,
        luu: weights.r_u * dt,
    }
}

fn terminal_derivatives(
    x: &RigidBodyState,
    problem: &PlanProblem,
    weights: &CostWeights,
) -> (Tangent, StateMatrix) {
    let ep = x.pose.p - problem.p_f;
    let er = log_so3(&problem.r_f.transpose().compose(&x.pose.r));
    let jinv = right_jacobian_inv_so3(&er);
    let mut vx = Tangent::zeros();
    vx.fixed_rows_mut::<3>(0).copy_from(&(weights.p_pf * ep));
    vx.fixed_rows_mut::<3>(3)
        .copy_from(&(jinv.transpose() * weights.p_rf * er));
    let mut vxx = StateMatrix::zeros();
    vxx.fixed_view_mut::<3, 3>(0, 0).copy_from(&weights.p_pf);
    vxx.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(jinv.transpose() * weights.p_rf * jinv));
    (vx, vxx)
}

/// Gradients `(Q_x, Q_u)` of the open-loop cost-to-go at every step, formed
/// with the same derivative assembly the backward pass uses.
pub fn cost_to_go_gradients(
    problem: &PlanProblem,
    weights: &CostWeights,
    traj: &Trajectory,
) -> Vec<(Tangent, Vector6<f64>)> {
    let n = traj.len();
    let (mut vx, _) = terminal_derivatives(&traj.states[n], problem, weights);
    let mut out = vec![(Tangent::zeros(), Vector6::zeros()); n];
    for k in (0..n).rev() {
        let (a, b) = step_jacobians(&traj.states[k], &traj.controls[k], &problem.inertia, traj.dt);
        let l = running_derivatives(
            &traj.states[k],
            &traj.controls[k],
            weights,
            &problem.p_rcm,
            traj.dt,
        );
        let qx = l.lx + a.transpose() * vx;
        let qu = l.lu + b.transpose() * vx;
        out[k] = (qx, qu);
        vx = qx;
    }
    out
}

struct Gains {
    k: Vec<Vector6<f64>>,
    big_k: Vec<GainMatrix>,
    /// Predicted first- and second-order cost change for a unit step.
    dv: (f64, f64),
}

fn backward_pass(
    problem: &PlanProblem,
    weights: &CostWeights,
    traj: &Trajectory,
    mu: f64,
) -> Option<Gains> {
    let n = traj.len();
    let (mut vx, mut vxx) = terminal_derivatives(&traj.states[n], problem, weights);
    let mut k_ff = vec![Vector6::zeros(); n];
    let mut k_fb = vec![GainMatrix::zeros(); n];
    let mut dv = (0.0, 0.0);
    let reg = StateMatrix::identity() * mu;
    for k in (0..n).rev() {
        let (a, b) = step_jacobians(&traj.states[k], &traj.controls[k], &problem.inertia, traj.dt);
        let l = running_derivatives(
            &traj.states[k],
            &traj.controls[k],
            weights,
            &problem.p_rcm,
            traj.dt,
        );
        let vxx_reg = vxx + reg;
        let qx = l.lx + a.transpose() * vx;
        let qu = l.lu + b.transpose() * vx;
        let qxx = l.lxx + a.transpose() * vxx * a;
        let quu = l.luu + b.transpose() * vxx_reg * b;
        let qux = b.transpose() * vxx_reg * a;
        let quu = (quu + quu.transpose()) * 0.5;

        let chol = quu.cholesky()?;
        let kk = -chol.solve(&qu);
        let kfb: GainMatrix = -chol.solve(&qux);
        if !kk.iter().chain(kfb.iter()).all(|v| v.is_finite()) {
            return None;
        }
        dv.0 += kk.dot(&qu);
        dv.1 += 0.5 * kk.dot(&(quu * kk));

        vx = qx + kfb.transpose() * quu * kk + kfb.transpose() * qu + qux.transpose() * kk;
        let v = qxx + kfb.transpose() * quu * kfb + kfb.transpose() * qux + qux.transpose() * kfb;
        vxx = (v + v.transpose()) * 0.5;
        k_ff[k] = kk;
        k_fb[k] = kfb;
    }
    Some(Gains {
        k: k_ff,
        big_k: k_fb,
        dv,
    })
}

fn forward_pass(
    problem: &PlanProblem,
    traj: &Trajectory,
    gains: &Gains,
    alpha: f64,
) -> Trajectory {
    let n = traj.len();
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    states.push(problem.x0);
    for k in 0..n {
        let dx = states[k].minus(&traj.states[k]);
        let u = ControlInput(traj.controls[k].0 + gains.k[k] * alpha + gains.big_k[k] * dx);
        let next = step(&states[k], &u, &problem.inertia, traj.dt);
        controls.push(u);
        states.push(next);
    }
    Trajectory {
        states,
        controls,
        dt: traj.dt,
    }
}

/// Solve with default [`SolverOptions`].
pub fn solve(
    problem: &PlanProblem,
    weights: &CostWeights,
    warm_start: Option<&Trajectory>,
) -> Result<Solution, PlanError> {
    solve_with(problem, weights, warm_start, &SolverOptions::default())
}

pub fn solve_with(
    problem: &PlanProblem,
    weights: &CostWeights,
    warm_start: Option<&Trajectory>,
    opts: &SolverOptions,
) -> Result<Solution, PlanError> {
    problem.validate()?;
    weights.validate()?;
    let dt = problem.dt();
    if let Some(w) = warm_start {
        if w.len() != problem.n_traj {
            return Err(PlanError::InvalidProblem(format!(
                "warm start has {} steps, problem has {}",
                w.len(),
                problem.n_traj
            )));
        }
    }

    let zero = Trajectory::rollout(
        problem.x0,
        vec![ControlInput::zero(); problem.n_traj],
        &problem.inertia,
        dt,
    );
    let mut traj = zero;
    let mut cost = total_cost(problem, weights, &traj);
    if let Some(w) = warm_start {
        let candidate = Trajectory::rollout(problem.x0, w.controls.clone(), &problem.inertia, dt);
        let c = total_cost(problem, weights, &candidate);
        if c.is_finite() && (c < cost || !cost.is_finite()) {
            traj = candidate;
            cost = c;
        }
    }
    if !cost.is_finite() {
        return Err(PlanError::NonFiniteCost);
    }

    let mut history = vec![cost];
    let mut mu = opts.mu_init.max(opts.mu_min);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iters {
        iterations += 1;
        let gains = match backward_pass(problem, weights, &traj, mu) {
            Some(g) => g,
            None => {
                mu *= 10.0;
                if mu > opts.mu_max {
                    break;
                }
                continue;
            }
        };
        if -gains.dv.0 <= f64::EPSILON * cost.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }

        let mut accepted = None;
        for i in 0..=opts.line_search_steps {
            let alpha = 0.5f64.powi(i as i32);
            let candidate = forward_pass(problem, &traj, &gains, alpha);
            let c = total_cost(problem, weights, &candidate);
            if c.is_finite() && c < cost {
                accepted = Some((candidate, c));
                break;
            }
        }

        match accepted {
            Some((candidate, c)) => {
                let improvement = cost - c;
                traj = candidate;
                let old = cost;
                cost = c;
                history.push(cost);
                mu = (mu * 0.5).max(opts.mu_min);
                if improvement <= opts.tol_rel * old {
                    converged = true;
                    break;
                }
            }
            None => {
                mu *= 10.0;
                if mu > opts.mu_max {
                    // No descent direction left at any damping: a local minimum
                    // to working precision.
                    converged = true;
                    break;
                }
            }
        }
    }

    let solution = Solution {
        trajectory: traj,
        cost,
        iterations,
        cost_history: history,
    };
    if converged {
        Ok(solution)
    } else {
        Err(PlanError::NotConverged {
            best: Box::new(solution),
        })
    }
}

/// Geodesic-weighted pose distance used to pick the tracking reference.
pub fn pose_distance(a: &RigidBodyState, b: &RigidBodyState, rot_weight: f64) -> f64 {
    (a.pose.p - b.pose.p).norm()
        + rot_weight * log_so3(&a.pose.r.transpose().compose(&b.pose.r)).norm()
}

/// Closest trajectory state to `x_now` plus `lookahead`, clamped to `N`.
/// Ties resolve to the earliest index.
pub fn pick_tracking_index(
    traj: &Trajectory,
    x_now: &RigidBodyState,
    lookahead: usize,
    rot_weight: f64,
) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, x) in traj.states.iter().enumerate() {
        let d = pose_distance(x, x_now, rot_weight);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    (best + lookahead).min(traj.len())
}
