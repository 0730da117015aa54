//! Closed-loop trials: scene, robot, perception and supervisor stepped
//! together at the camera rate, with per-tick records and outcome metrics.

use std::fmt::Write as _;

use nalgebra::{DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::ddp::Trajectory;
use crate::frame::Frame;
use crate::kinematics::{forward_kinematics, JointState, KinematicsError};
use crate::perception::TipDetector;
use crate::scene::{ContactPhase, Renderer, Scene, SceneError, SceneState};
use crate::servo::direction_error_deg;
use crate::supervisor::{limit_abort, AbortReason, Event, Phase, Supervisor, TickInput};

#[derive(Debug, Error)]
pub enum TrialError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("invalid config: {0}")]
    Config(String),
}

/// Which trial to run. Overrides replace the sampled goal or remote centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialSpec {
    pub index: usize,
    pub eye: u64,
    pub seed: u64,
    #[serde(default)]
    pub goal_px: Option<[f64; 2]>,
    #[serde(default)]
    pub rcm: Option<[f64; 3]>,
}

impl TrialSpec {
    pub fn new(index: usize, eye: u64, seed: u64) -> Self {
        TrialSpec { index, eye, seed, goal_px: None, rcm: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub t: f64,
    pub phase: Phase,
    pub contact_phase: ContactPhase,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub p: [f64; 3],
    pub tip_px: Option<[f64; 2]>,
    pub truth_tip_px: Option<[f64; 2]>,
    pub ncc: Option<f64>,
    pub contact_score: Option<f64>,
    pub p_vp: Option<f64>,
    pub rcm_error: f64,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Aborted { cause: AbortReason },
}

/// Per-trial metrics. Distances are in micrometres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub index: usize,
    pub eye: u64,
    pub seed: u64,
    pub outcome: Outcome,
    pub ticks: u64,
    pub duration_s: f64,
    pub goal_px: [f64; 2],
    /// Tip-to-goal distance in the image when the tip first touched tissue.
    pub final_xy_error_um: Option<f64>,
    pub contact_tick: Option<u64>,
    pub true_contact_tick: Option<u64>,
    /// Tip travel between the true contact and the detected one.
    pub contact_overshoot_um: Option<f64>,
    pub early_contact_trigger: bool,
    pub puncture_tick: Option<u64>,
    pub true_puncture_tick: Option<u64>,
    /// Stop position minus true puncture position.
    pub puncture_offset_um: Option<[f64; 3]>,
    pub early_puncture_trigger: bool,
    pub rcm_max_um: f64,
    pub broyden_updates: u32,
    pub jacobian_direction_error_deg: f64,
}

/// Returned by the tick observer to keep going or stop the trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickControl {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct TrialRun {
    pub result: TrialResult,
    pub records: Vec<TickRecord>,
    /// Every planned trajectory with the tick it was planned on.
    pub plans: Vec<(u64, Trajectory)>,
}

/// Local image Jacobian of horizontal tip motion at `p`, by central differences.
pub fn true_image_jacobian(scene: &Scene, p: &Vector3<f64>) -> nalgebra::Matrix2<f64> {
    let h = 1e-6;
    let mut j = nalgebra::Matrix2::zeros();
    for (c, d) in [Vector3::x(), Vector3::y()].iter().enumerate() {
        let a = scene.camera.project(&(p + d * h)).unwrap_or_default();
        let b = scene.camera.project(&(p - d * h)).unwrap_or_default();
        j.set_column(c, &((a - b) / (2.0 * h)));
    }
    j
}

/// Starting joint vector: prismatic stages put the tip over the start point.
pub fn start_joints(cfg: &RunConfig, scene: &Scene) -> DVector<f64> {
    let mut q = DVector::zeros(cfg.robot.dof());
    q[0] = scene.start_xy.x;
    q[1] = scene.start_xy.y;
    q
}

pub fn run_trial(cfg: &RunConfig, spec: &TrialSpec) -> Result<TrialRun, TrialError> {
    run_trial_with(cfg, spec, |_, _| TickControl::Continue)
}

/// Runs one trial, calling `observe` after every tick with its record and frame.
pub fn run_trial_with(
    cfg: &RunConfig,
    spec: &TrialSpec,
    mut observe: impl FnMut(&TickRecord, &Frame) -> TickControl,
) -> Result<TrialRun, TrialError> {
    cfg.validate().map_err(|e| TrialError::Config(e.to_string()))?;
    let scene = Scene::sample(&cfg.scene, spec.eye, spec.seed)?;
    let dt = cfg.dt();
    let mut renderer = Renderer::new(&scene, spec.seed ^ 0x006e_6f69_7365);
    let mut joints = JointState::at(start_joints(cfg, &scene));
    let g0 = forward_kinematics(&cfg.robot, &joints.q)?;
    let p_rcm = spec
        .rcm
        .map(Vector3::from)
        .unwrap_or_else(|| g0.p + g0.r.z_axis() * cfg.rcm_distance);
    let goal_px = spec.goal_px.map(Vector2::from).unwrap_or(scene.goal_px);
    let mut state = SceneState::new(&scene, &g0);
    let mut detector = TipDetector::new(cfg.perception.tip, spec.seed ^ 0x0074_6970);
    let mut sup = Supervisor::new(cfg, goal_px, p_rcm);
    let mut records = Vec::new();
    let mut plans = Vec::new();

    for tick in 0u64.. {
        let g = forward_kinematics(&cfg.robot, &joints.q)?;
        state.update(&scene, &g, tick);
        let mut frame = renderer.render(&scene, &g, &state, tick)?;
        frame.timestamp = tick as f64 * dt;
        let tip = detector.detect(&frame, sup.template()).ok();
        let mut out = sup.step(&TickInput { tick, q: &joints.q, frame: &frame, tip_px: tip });
        if !sup.phase().is_terminal() {
            if let Err(e) = joints.integrate(&cfg.robot, &out.qdot, dt) {
                out.events.extend(sup.abort(limit_abort(&e)));
                out.qdot.fill(0.0);
            }
        }
        if let Some(plan) = out.plan.take() {
            plans.push((tick, plan));
        }
        let rec = TickRecord {
            tick,
            t: tick as f64 * dt,
            phase: sup.phase(),
            contact_phase: state.phase,
            q: joints.q.iter().copied().collect(),
            qdot: out.qdot.iter().copied().collect(),
            p: g.p.into(),
            tip_px: tip.map(Into::into),
            truth_tip_px: frame.truth_tip_px.map(Into::into),
            ncc: out.ncc,
            contact_score: out.contact_score,
            p_vp: out.verdict.map(|v| v.p_vp),
            rcm_error: out.rcm_error,
            events: out.events,
        };
        let control = observe(&rec, &frame);
        records.push(rec);
        if control == TickControl::Stop && !sup.phase().is_terminal() {
            let events = sup.abort(AbortReason::OperatorStop);
            records.last_mut().expect("just pushed").events.extend(events);
            records.last_mut().expect("just pushed").phase = sup.phase();
        }
        if sup.phase().is_terminal() {
            break;
        }
    }

    let result = summarise(cfg, spec, &scene, &state, &sup, &records, goal_px);
    Ok(TrialRun { result, records, plans })
}

fn phase_entry(records: &[TickRecord], phase: Phase) -> Option<&TickRecord> {
    records.iter().find(|r| r.events.iter().any(|e| matches!(e, Event::Phase { to, .. } if *to == phase)))
}

fn summarise(
    cfg: &RunConfig,
    spec: &TrialSpec,
    scene: &Scene,
    state: &SceneState,
    sup: &Supervisor,
    records: &[TickRecord],
    goal_px: Vector2<f64>,
) -> TrialResult {
    let um_per_px = 1e3 / cfg.scene.camera.px_per_mm;
    let contact = phase_entry(records, Phase::ContactStopped);
    let puncture = phase_entry(records, Phase::PunctureStopped);
    let true_contact = state.contact_tick;
    let early_contact = match (contact, true_contact) {
        (Some(c), Some(t)) => c.tick < t,
        (Some(_), None) => true,
        _ => false,
    };
    let xy_tick = if early_contact { contact.map(|c| c.tick) } else { true_contact };
    let final_xy_error_um = xy_tick
        .and_then(|t| records.get(t as usize))
        .and_then(|r| r.truth_tip_px)
        .map(|px| (Vector2::from(px) - goal_px).norm() * um_per_px);
    let contact_overshoot_um = match (contact, state.contact_point) {
        (Some(c), Some(pc)) if !early_contact => Some((Vector3::from(c.p) - pc).norm() * 1e6),
        (Some(_), _) => Some(0.0),
        _ => None,
    };
    let early_puncture = match (puncture, state.puncture_tick) {
        (Some(p), Some(t)) => p.tick < t,
        (Some(_), None) => true,
        _ => false,
    };
    let puncture_offset_um = match (puncture, state.puncture_point) {
        (Some(p), Some(pp)) => Some(((Vector3::from(p.p) - pp) * 1e6).into()),
        _ => None,
    };
    let last = records.last();
    let p_end = last.map_or(scene.goal, |r| Vector3::from(r.p));
    TrialResult {
        index: spec.index,
        eye: spec.eye,
        seed: spec.seed,
        outcome: match sup.abort_reason() {
            Some(cause) => Outcome::Aborted { cause: cause.clone() },
            None => Outcome::Completed,
        },
        ticks: records.len() as u64,
        duration_s: records.len() as f64 * cfg.dt(),
        goal_px: goal_px.into(),
        final_xy_error_um,
        contact_tick: contact.map(|c| c.tick),
        true_contact_tick: true_contact,
        contact_overshoot_um,
        early_contact_trigger: early_contact,
        puncture_tick: puncture.map(|p| p.tick),
        true_puncture_tick: state.puncture_tick,
        puncture_offset_um,
        early_puncture_trigger: early_puncture,
        rcm_max_um: records.iter().map(|r| r.rcm_error).fold(0.0, f64::max) * 1e6,
        broyden_updates: sup.broyden.updates,
        jacobian_direction_error_deg: direction_error_deg(&sup.broyden.j, &true_image_jacobian(scene, &p_end)),
    }
}

/// One line of a trial log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Header { version: String, config: Box<RunConfig>, spec: TrialSpec },
    Tick(Box<TickRecord>),
    Result(Box<TrialResult>),
}

/// JSON-lines log: header, one line per tick, result.
pub fn trial_log(cfg: &RunConfig, spec: &TrialSpec, run: &TrialRun) -> String {
    let mut out = String::new();
    let header = LogLine::Header {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: Box::new(cfg.clone()),
        spec: spec.clone(),
    };
    let line = |l: &LogLine| serde_json::to_string(l).expect("log lines serialise");
    writeln!(out, "{}", line(&header)).expect("string write");
    for r in &run.records {
        writeln!(out, "{}", line(&LogLine::Tick(Box::new(r.clone())))).expect("string write");
    }
    writeln!(out, "{}", line(&LogLine::Result(Box::new(run.result.clone())))).expect("string write");
    out
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("log line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("log has no header")]
    MissingHeader,
    #[error("replay diverged at tick {tick} in field `{field}`")]
    Mismatch { tick: u64, field: String },
    #[error("replay produced {got} ticks, log has {expected}")]
    Length { expected: usize, got: usize },
    #[error(transparent)]
    Trial(#[from] TrialError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub ticks: usize,
    /// Detected contact tick of the re-run.
    pub contact_tick: Option<u64>,
    pub gamma: f64,
    /// False when the threshold was overridden and no comparison was made.
    pub compared: bool,
}

fn first_difference(a: &serde_json::Value, b: &serde_json::Value) -> Option<String> {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find(|k| x.get(*k) != y.get(*k)).map(|k| k.to_string())
        }
        _ if a != b => Some(String::from("<record>")),
        _ => None,
    }
}

/// Re-runs the logged trial. Without `gamma` every tick must match the log
/// exactly; with it the contact threshold is replaced and only the new
/// contact tick is reported.
pub fn replay(log: &str, gamma: Option<f64>) -> Result<ReplayReport, ReplayError> {
    let mut lines = log.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (cfg, spec) = match lines.next() {
        Some((i, l)) => match serde_json::from_str::<LogLine>(l) {
            Ok(LogLine::Header { config, spec, .. }) => (*config, spec),
            Ok(_) => return Err(ReplayError::MissingHeader),
            Err(e) => return Err(ReplayError::Parse { line: i + 1, message: e.to_string() }),
        },
        None => return Err(ReplayError::MissingHeader),
    };
    let mut logged = Vec::new();
    for (i, l) in lines {
        let value: serde_json::Value =
            serde_json::from_str(l).map_err(|e| ReplayError::Parse { line: i + 1, message: e.to_string() })?;
        if value.get("kind").and_then(|k| k.as_str()) == Some("tick") {
            logged.push(value);
        }
    }
    let mut cfg = cfg;
    if let Some(g) = gamma {
        cfg.perception.gamma = g;
    }
    let run = run_trial(&cfg, &spec)?;
    if gamma.is_none() {
        for (rec, want) in run.records.iter().zip(&logged) {
            let got = serde_json::to_value(LogLine::Tick(Box::new(rec.clone()))).expect("records serialise");
            if let Some(field) = first_difference(want, &got) {
                return Err(ReplayError::Mismatch { tick: rec.tick, field });
            }
        }
        if run.records.len() != logged.len() {
            return Err(ReplayError::Length { expected: logged.len(), got: run.records.len() });
        }
    }
    Ok(ReplayReport {
        ticks: run.records.len(),
        contact_tick: run.result.contact_tick,
        gamma: cfg.perception.gamma,
        compared: gamma.is_none(),
    })
}
