//! Phase state machine that turns measurements into joint-rate commands.

use nalgebra::{DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::ddp::{rcm_error, solve_with, PlanError, PlanProblem, Trajectory};
use crate::dynamics::{ControlInput, RigidBodyState};
use crate::frame::Frame;
use crate::kinematics::{forward_kinematics, min_singular_value, KinematicsError, TaskSpaceTracker};
use crate::perception::{
    contact_score, is_contact, ncc_map_roi, roi_around, DetectorVerdict, JumpDetector, PunctureDetector, Template,
};
use crate::se3::{log_so3, BodyVelocity, Pose};
use crate::servo::{aligned_orientation, lowering_waypoint, planar_waypoint, select_xy, BroydenEstimator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    PlanarServo,
    Lowering,
    ContactStopped,
    Inserting,
    PunctureStopped,
    Aborted,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::PunctureStopped | Phase::Aborted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum AbortReason {
    RcmViolation { error: f64 },
    SingularJacobian,
    TipLost,
    JointLimit { joint: usize },
    PlanFailure { message: String },
    ImageJacobianSingular,
    InsertionLimit,
    Timeout,
    OperatorStop,
}

/// Notable things that happened during one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Phase { from: Phase, to: Phase },
    Plan { target: Vector3<f64>, iterations: usize, cost: f64 },
    Broyden { updates: u32 },
    TemplateCaptured { tip_px: Vector2<f64> },
    Contact { score: f64 },
    Puncture { p_vp: f64 },
    Abort { cause: AbortReason },
}

/// Sensor data for one tick.
pub struct TickInput<'a> {
    pub tick: u64,
    pub q: &'a DVector<f64>,
    pub frame: &'a Frame,
    pub tip_px: Option<Vector2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickOutput {
    pub qdot: DVector<f64>,
    pub events: Vec<Event>,
    pub ncc: Option<f64>,
    pub contact_score: Option<f64>,
    pub verdict: Option<DetectorVerdict>,
    pub rcm_error: f64,
    /// Trajectory planned on this tick.
    pub plan: Option<Trajectory>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MotionKind {
    Settle,
    Planar,
    Lower,
    Insert,
}

#[derive(Debug, Clone)]
struct Motion {
    kind: MotionKind,
    traj: Option<Trajectory>,
    tracker: TaskSpaceTracker,
    ticks: usize,
    samples: Vec<Vector2<f64>>,
}

/// Pose and tip pixel where a planar motion began, for the secant update.
#[derive(Debug, Clone, Copy)]
struct Anchor {
    p: Vector3<f64>,
    tip: Vector2<f64>,
}

#[derive(Debug, Clone)]
pub struct Supervisor {
    cfg: RunConfig,
    phase: Phase,
    goal_px: Vector2<f64>,
    p_rcm: Vector3<f64>,
    tip_dir_body: Vector3<f64>,
    pub broyden: BroydenEstimator,
    template: Option<Template>,
    reference_max: f64,
    motion: Option<Motion>,
    anchor: Option<Anchor>,
    jump: JumpDetector,
    insert_origin: Option<(Vector3<f64>, Vector3<f64>)>,
    lost_since: Option<u64>,
    singular_since: Option<u64>,
    last_plan: Option<Trajectory>,
    abort: Option<AbortReason>,
}

impl Supervisor {
    pub fn new(cfg: &RunConfig, goal_px: Vector2<f64>, p_rcm: Vector3<f64>) -> Self {
        Supervisor {
            cfg: cfg.clone(),
            phase: Phase::Idle,
            goal_px,
            p_rcm,
            tip_dir_body: cfg.scene.needle.tip_direction_body(),
            broyden: BroydenEstimator::new(cfg.servo.j0_matrix(), cfg.servo.broyden),
            template: None,
            reference_max: 1.0,
            motion: None,
            anchor: None,
            jump: JumpDetector::new(cfg.perception.jump),
            insert_origin: None,
            lost_since: None,
            singular_since: None,
            last_plan: None,
            abort: None,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn goal_px(&self) -> Vector2<f64> {
        self.goal_px
    }

    pub fn p_rcm(&self) -> Vector3<f64> {
        self.p_rcm
    }

    pub fn abort_reason(&self) -> Option<&AbortReason> {
        self.abort.as_ref()
    }

    pub fn template(&self) -> Option<&Template> {
        self.template.as_ref()
    }

    /// The trajectory currently being followed, if any.
    pub fn active_plan(&self) -> Option<&Trajectory> {
        self.motion.as_ref().and_then(|m| m.traj.as_ref())
    }

    fn set_phase(&mut self, to: Phase, events: &mut Vec<Event>) {
        if to != self.phase {
            events.push(Event::Phase { from: self.phase, to });
            self.phase = to;
        }
    }

    /// Stops the trial from outside, for example on operator request.
    pub fn abort(&mut self, cause: AbortReason) -> Vec<Event> {
        let mut events = Vec::new();
        if !self.phase.is_terminal() {
            events.push(Event::Abort { cause: cause.clone() });
            self.abort = Some(cause);
            self.motion = None;
            self.set_phase(Phase::Aborted, &mut events);
        }
        events
    }

    pub fn step(&mut self, input: &TickInput) -> TickOutput {
        let n = self.cfg.robot.dof();
        let mut out = TickOutput {
            qdot: DVector::zeros(n),
            events: Vec::new(),
            ncc: None,
            contact_score: None,
            verdict: None,
            rcm_error: 0.0,
            plan: None,
        };
        if self.phase.is_terminal() {
            return out;
        }
        let g = match forward_kinematics(&self.cfg.robot, input.q) {
            Ok(g) => g,
            Err(e) => {
                out.events = self.abort(limit_abort(&e));
                return out;
            }
        };
        out.rcm_error = rcm_error(&g.p, &g.r, &self.p_rcm);
        if let Some(cause) = self.guards(input, &out) {
            out.events = self.abort(cause);
            return out;
        }

        // Contact watch runs on every frame once the template exists.
        if matches!(self.phase, Phase::PlanarServo | Phase::Lowering) {
            if let (Some(tpl), Some(tip)) = (&self.template, input.tip_px) {
                let roi = roi_around(tpl, &tip, self.cfg.perception.search_radius);
                if let Ok(res) = ncc_map_roi(&input.frame.image, tpl, roi) {
                    out.ncc = Some(res.max);
                    if let Ok(score) = contact_score(self.reference_max, res.max) {
                        out.contact_score = Some(score);
                        if is_contact(score, self.cfg.perception.gamma) {
                            out.events.push(Event::Contact { score });
                            self.motion = None;
                            self.insert_origin = Some((g.p, g.r.apply(&self.tip_dir_body)));
                            self.set_phase(Phase::ContactStopped, &mut out.events);
                            return out;
                        }
                    }
                }
            }
        }

        match self.phase {
            Phase::Idle => {
                self.motion = Some(Motion::settle(&self.cfg));
                self.set_phase(Phase::PlanarServo, &mut out.events);
                self.drive(input, &g, &mut out);
            }
            Phase::PlanarServo | Phase::Lowering => self.drive(input, &g, &mut out),
            Phase::ContactStopped => {
                let traj = self.insertion_trajectory(&g);
                let mut motion = Motion::new(MotionKind::Insert, traj, &self.cfg);
                motion.tracker.reset();
                self.motion = Some(motion);
                self.jump.reset();
                self.set_phase(Phase::Inserting, &mut out.events);
            }
            Phase::Inserting => self.insert(input, &g, &mut out),
            Phase::PunctureStopped | Phase::Aborted => {}
        }
        out
    }

    fn guards(&mut self, input: &TickInput, out: &TickOutput) -> Option<AbortReason> {
        let s = &self.cfg.safety;
        let rate = self.cfg.frame_rate;
        if out.rcm_error > s.rcm_limit {
            return Some(AbortReason::RcmViolation { error: out.rcm_error });
        }
        if input.tick as f64 / rate > s.max_duration {
            return Some(AbortReason::Timeout);
        }
        if input.tip_px.is_some() {
            self.lost_since = None;
        } else {
            let since = *self.lost_since.get_or_insert(input.tick);
            if (input.tick - since) as f64 / rate > s.tip_lost_timeout {
                return Some(AbortReason::TipLost);
            }
        }
        let sigma = min_singular_value(&self.cfg.robot, input.q).unwrap_or(0.0);
        if sigma >= s.min_singular_value {
            self.singular_since = None;
        } else {
            let since = *self.singular_since.get_or_insert(input.tick);
            if (input.tick - since) as f64 / rate > s.singular_timeout {
                return Some(AbortReason::SingularJacobian);
            }
        }
        None
    }

    /// Follows the current motion and starts the next one when it is done.
    fn drive(&mut self, input: &TickInput, g: &Pose, out: &mut TickOutput) {
        let dt = self.cfg.dt();
        let settle = self.cfg.servo.settle_frames;
        let mpc = self.cfg.servo.mpc;
        let period = self.cfg.servo.mpc_period;
        let Some(motion) = self.motion.as_mut() else {
            self.motion = Some(Motion::settle(&self.cfg));
            return;
        };
        if let Some(traj) = &motion.traj {
            match motion.tracker.step(&self.cfg.robot, input.q, traj, dt) {
                Ok(cmd) => out.qdot = cmd.qdot,
                Err(e) => {
                    out.events.extend(self.abort(limit_abort(&e)));
                    return;
                }
            }
        }
        motion.ticks += 1;
        let horizon = motion.traj.as_ref().map_or(0, |t| t.len());
        let done = if mpc && motion.kind != MotionKind::Settle {
            if let Some(tip) = input.tip_px {
                motion.samples.push(tip);
            }
            motion.ticks >= period
        } else {
            if motion.ticks > horizon {
                if let Some(tip) = input.tip_px {
                    motion.samples.push(tip);
                }
            }
            motion.ticks >= horizon + settle
        };
        if done {
            let finished = self.motion.take().expect("motion present");
            self.decide(input, g, finished, out);
        }
    }

    /// Chooses and plans the next motion from the averaged tip measurement.
    fn decide(&mut self, input: &TickInput, g: &Pose, finished: Motion, out: &mut TickOutput) {
        if finished.samples.is_empty() {
            // Nothing seen; hold and look again.
            self.motion = Some(Motion::settle(&self.cfg));
            return;
        }
        let tip = finished.samples.iter().sum::<Vector2<f64>>() / finished.samples.len() as f64;
        if finished.kind == MotionKind::Planar {
            if let Some(a) = self.anchor {
                if self.broyden.observe(&select_xy(&(g.p - a.p)), &(tip - a.tip)) {
                    out.events.push(Event::Broyden { updates: self.broyden.updates });
                }
            }
        }
        self.anchor = None;
        let aligned = (self.goal_px - tip).norm() <= self.cfg.servo.alpha_px;
        let next = match (self.phase, aligned) {
            (Phase::PlanarServo, true) | (Phase::Lowering, true) => Phase::Lowering,
            _ => Phase::PlanarServo,
        };
        if next == Phase::Lowering && self.template.is_none() {
            match Template::capture(&input.frame.image, &tip, self.cfg.perception.template_size) {
                Ok(tpl) => {
                    let roi = roi_around(&tpl, &tip, self.cfg.perception.search_radius);
                    self.reference_max = ncc_map_roi(&input.frame.image, &tpl, roi).map_or(1.0, |r| r.max);
                    out.events.push(Event::TemplateCaptured { tip_px: tip });
                    self.template = Some(tpl);
                }
                Err(_) => {
                    out.events.extend(self.abort(AbortReason::TipLost));
                    return;
                }
            }
        }
        self.set_phase(next, &mut out.events);

        let target = if next == Phase::Lowering {
            lowering_waypoint(&g.p, self.cfg.servo.eta)
        } else {
            match planar_waypoint(&g.p, &tip, &self.goal_px, &self.broyden.j, self.cfg.servo.max_planar_step) {
                Ok(p) => {
                    self.anchor = Some(Anchor { p: g.p, tip });
                    p
                }
                Err(_) => {
                    out.events.extend(self.abort(AbortReason::ImageJacobianSingular));
                    return;
                }
            }
        };
        let kind = if next == Phase::Lowering { MotionKind::Lower } else { MotionKind::Planar };
        match self.plan(g, &finished, target) {
            Ok((traj, iterations, cost)) => {
                out.events.push(Event::Plan { target, iterations, cost });
                self.last_plan = Some(traj.clone());
                out.plan = Some(traj.clone());
                self.motion = Some(Motion::new(kind, traj, &self.cfg));
            }
            Err(message) => {
                out.events.extend(self.abort(AbortReason::PlanFailure { message }));
            }
        }
    }

    fn plan(&self, g: &Pose, finished: &Motion, target: Vector3<f64>) -> Result<(Trajectory, usize, f64), String> {
        let cfg = &self.cfg;
        let r_f = aligned_orientation(&g.r, &target, &self.p_rcm).map_err(|e| e.to_string())?;
        // In receding-horizon mode the robot is moving; start from the
        // reference velocity it is currently following.
        let vel = if cfg.servo.mpc {
            finished
                .traj
                .as_ref()
                .map(|t| t.states[finished.tracker_index().min(t.len())].vel)
                .unwrap_or_else(BodyVelocity::zero)
        } else {
            BodyVelocity::zero()
        };
        let x0 = RigidBodyState::new(*g, vel);
        let problem = PlanProblem {
            x0,
            p_f: target,
            r_f,
            p_rcm: self.p_rcm,
            horizon: cfg.horizon(),
            n_traj: cfg.planner.n_traj,
            inertia: cfg.planner.inertia,
        };
        let warm = if cfg.servo.mpc {
            self.last_plan.as_ref().map(|t| {
                let mut w = t.clone();
                for _ in 0..cfg.servo.mpc_period {
                    w = w.shifted(x0, &cfg.planner.inertia);
                }
                w
            })
        } else {
            None
        };
        match solve_with(&problem, &cfg.planner.weights, warm.as_ref(), &cfg.planner.solver) {
            Ok(sol) => Ok((sol.trajectory, sol.iterations, sol.cost)),
            Err(PlanError::NotConverged { best }) => Ok((best.trajectory, best.iterations, best.cost)),
            Err(e) => Err(e.to_string()),
        }
    }

    /// Straight advance along the tip direction captured at contact, with
    /// the shaft kept pointing through the remote centre.
    fn insertion_trajectory(&self, g: &Pose) -> Trajectory {
        let cfg = &self.cfg;
        let dt = cfg.dt();
        let (origin, dir) = self.insert_origin.unwrap_or((g.p, g.r.apply(&self.tip_dir_body)));
        let n = ((cfg.insertion.max_advance / cfg.insertion.speed) / dt).ceil() as usize + 1;
        let mut poses = Vec::with_capacity(n + 1);
        let mut r = g.r;
        for k in 0..=n {
            let p = origin + dir * (cfg.insertion.speed * dt * k as f64);
            r = aligned_orientation(&r, &p, &self.p_rcm).unwrap_or(r);
            poses.push(Pose::new(p, r));
        }
        let mut states: Vec<RigidBodyState> = poses
            .windows(2)
            .map(|w| {
                let rt = w[0].r.matrix().transpose();
                let v = rt * (w[1].p - w[0].p) / dt;
                let om = log_so3(&w[0].r.transpose().compose(&w[1].r)) / dt;
                RigidBodyState::new(w[0], BodyVelocity::new(v, om))
            })
            .collect();
        states.push(RigidBodyState::at_rest(*poses.last().expect("non-empty")));
        Trajectory { controls: vec![ControlInput::zero(); n], states, dt }
    }

    fn insert(&mut self, input: &TickInput, g: &Pose, out: &mut TickOutput) {
        let verdict = self.jump.step(input.frame, input.tip_px);
        out.verdict = Some(verdict);
        if verdict.triggered {
            out.events.push(Event::Puncture { p_vp: verdict.p_vp });
            self.motion = None;
            self.set_phase(Phase::PunctureStopped, &mut out.events);
            return;
        }
        let (origin, dir) = self.insert_origin.expect("set at contact");
        if (g.p - origin).dot(&dir) >= self.cfg.insertion.max_advance {
            out.events.extend(self.abort(AbortReason::InsertionLimit));
            return;
        }
        let dt = self.cfg.dt();
        let cmd = match self.motion.as_mut() {
            Some(Motion { traj: Some(traj), tracker, .. }) => tracker.step(&self.cfg.robot, input.q, traj, dt),
            _ => return,
        };
        match cmd {
            Ok(cmd) => out.qdot = cmd.qdot,
            Err(e) => out.events.extend(self.abort(limit_abort(&e))),
        }
    }
}

pub fn limit_abort(e: &KinematicsError) -> AbortReason {
    match e {
        KinematicsError::JointLimit { joint, .. } => AbortReason::JointLimit { joint: *joint },
        other => AbortReason::PlanFailure { message: other.to_string() },
    }
}

impl Motion {
    fn new(kind: MotionKind, traj: Trajectory, cfg: &RunConfig) -> Self {
        Motion { kind, traj: Some(traj), tracker: TaskSpaceTracker::new(cfg.tracker), ticks: 0, samples: Vec::new() }
    }

    fn settle(cfg: &RunConfig) -> Self {
        Motion { kind: MotionKind::Settle, traj: None, tracker: TaskSpaceTracker::new(cfg.tracker), ticks: 0, samples: Vec::new() }
    }

    fn tracker_index(&self) -> usize {
        self.tracker.last_index()
    }
}
