//! Live single-session operator service: HTTP control plus a lossy
//! WebSocket frame stream.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use cannula_core::config::RunConfig;
use cannula_core::frame::Frame;
use cannula_core::kinematics::forward_kinematics;
use cannula_core::scene::{Renderer, Scene, SceneState};
use cannula_core::se3::Pose;
use cannula_core::supervisor::Phase;
use cannula_core::trial::{run_trial_with, start_joints, TickControl, TickRecord, TrialResult, TrialSpec};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServiceOptions {
    pub eye: u64,
    pub seed: u64,
    /// Simulated seconds per wall second; 0 runs unpaced.
    pub speed: f64,
    /// Publish every Nth frame on the stream.
    pub stream_every: u64,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        ServiceOptions { eye: 0, seed: 1, speed: 1.0, stream_every: 2 }
    }
}

/// Everything `GET /state` reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub phase: Phase,
    pub active: bool,
    pub frame_id: Option<u64>,
    pub goal_px: Option<[f64; 2]>,
    pub rcm_px: Option<[f64; 2]>,
    /// Remote centre in robot coordinates (m), set by the RCM click.
    pub rcm: Option<[f64; 3]>,
    pub stop_requested: bool,
    pub clients: usize,
    pub trials_run: usize,
    pub last_result: Option<TrialResult>,
    pub last_error: Option<String>,
}

/// One message on `/stream`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamMessage {
    pub tick: u64,
    /// Base64 PNG of the grayscale frame.
    pub frame: String,
    pub phase: Phase,
    pub i_tt: Option<[f64; 2]>,
    pub i_goal: Option<[f64; 2]>,
    pub rcm_error_um: f64,
    pub ncc_max: Option<f64>,
    pub pixel_error: Option<f64>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
struct Click {
    u: f64,
    v: f64,
}

pub struct Service {
    cfg: RunConfig,
    opts: ServiceOptions,
    scene: Scene,
    tool_start: Pose,
    state: Mutex<SessionState>,
    stop: AtomicBool,
    frames: broadcast::Sender<Arc<str>>,
    latest: Mutex<Option<Arc<str>>>,
}

const STREAM_CAPACITY: usize = 16;

impl Service {
    /// Samples the session scene and renders the idle preview frame.
    pub fn new(cfg: RunConfig, opts: ServiceOptions) -> anyhow::Result<Arc<Self>> {
        cfg.validate()?;
        let scene = Scene::sample(&cfg.scene, opts.eye, opts.seed)?;
        let tool_start = forward_kinematics(&cfg.robot, &start_joints(&cfg, &scene))?;
        let preview = Renderer::new(&scene, opts.seed).render(&scene, &tool_start, &SceneState::new(&scene, &tool_start), 0)?;
        let (frames, _) = broadcast::channel(STREAM_CAPACITY);
        let svc = Service {
            cfg,
            opts,
            scene,
            tool_start,
            state: Mutex::new(SessionState {
                phase: Phase::Idle,
                active: false,
                frame_id: None,
                goal_px: None,
                rcm_px: None,
                rcm: None,
                stop_requested: false,
                clients: 0,
                trials_run: 0,
                last_result: None,
                last_error: None,
            }),
            stop: AtomicBool::new(false),
            frames,
            latest: Mutex::new(None),
        };
        let msg = encode_message(&preview, Phase::Idle, preview.truth_tip_px, None, 0.0, None)?;
        *svc.latest.lock().expect("latest lock") = Some(msg.into());
        Ok(Arc::new(svc))
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn snapshot(&self) -> SessionState {
        self.lock().clone()
    }

    fn lock(&self) -> MutexGuard<'_, SessionState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn publish(&self, msg: Arc<str>) {
        // A send error only means nobody is listening.
        let _ = self.frames.send(msg.clone());
        *self.latest.lock().unwrap_or_else(|e| e.into_inner()) = Some(msg);
    }

    fn run(self: Arc<Self>, spec: TrialSpec) {
        let dt = self.cfg.dt();
        let every = self.opts.stream_every.max(1);
        let wall = Instant::now();
        let goal = spec.goal_px.map(Vector2::from);
        let observe = |rec: &TickRecord, frame: &Frame| {
            {
                let mut s = self.lock();
                s.phase = rec.phase;
                s.frame_id = Some(rec.tick);
            }
            if rec.tick.is_multiple_of(every) || rec.phase.is_terminal() {
                let tip = rec.tip_px.map(Vector2::from);
                if let Ok(msg) = encode_message(frame, rec.phase, tip, goal, rec.rcm_error * 1e6, rec.ncc) {
                    self.publish(msg.into());
                }
            }
            if self.opts.speed > 0.0 {
                let due = Duration::from_secs_f64((rec.tick + 1) as f64 * dt / self.opts.speed);
                if let Some(wait) = due.checked_sub(wall.elapsed()) {
                    std::thread::sleep(wait);
                }
            }
            if self.stop.load(Ordering::SeqCst) {
                TickControl::Stop
            } else {
                TickControl::Continue
            }
        };
        let outcome = run_trial_with(&self.cfg, &spec, observe);
        let mut s = self.lock();
        s.active = false;
        s.stop_requested = false;
        s.trials_run += 1;
        match outcome {
            Ok(run) => {
                s.phase = run.records.last().map_or(Phase::Aborted, |r| r.phase);
                s.last_result = Some(run.result);
                s.last_error = None;
            }
            Err(e) => {
                s.phase = Phase::Aborted;
                s.last_error = Some(e.to_string());
            }
        }
    }
}

fn encode_message(
    frame: &Frame,
    phase: Phase,
    tip: Option<Vector2<f64>>,
    goal: Option<Vector2<f64>>,
    rcm_error_um: f64,
    ncc_max: Option<f64>,
) -> anyhow::Result<String> {
    let png = frame.image.to_png()?;
    let msg = StreamMessage {
        tick: frame.tick,
        frame: base64::engine::general_purpose::STANDARD.encode(png),
        phase,
        i_tt: tip.map(Into::into),
        i_goal: goal.map(Into::into),
        rcm_error_um,
        ncc_max,
        pixel_error: tip.zip(goal).map(|(t, g)| (t - g).norm()),
    };
    Ok(serde_json::to_string(&msg)?)
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn conflict(msg: &str) -> ApiError {
    ApiError(StatusCode::CONFLICT, msg.to_string())
}

fn parse_click(svc: &Service, body: &[u8]) -> Result<Vector2<f64>, ApiError> {
    let c: Click = serde_json::from_slice(body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
    let cam = &svc.scene.camera;
    let inside = c.u.is_finite()
        && c.v.is_finite()
        && (0.0..cam.width as f64).contains(&c.u)
        && (0.0..cam.height as f64).contains(&c.v);
    if !inside {
        return Err(ApiError(StatusCode::BAD_REQUEST, format!("click ({}, {}) outside the frame", c.u, c.v)));
    }
    Ok(Vector2::new(c.u, c.v))
}

type Shared = State<Arc<Service>>;

async fn get_state(State(svc): Shared) -> Json<SessionState> {
    Json(svc.snapshot())
}

async fn post_goal(State(svc): Shared, body: Bytes) -> Result<Json<SessionState>, ApiError> {
    let px = parse_click(&svc, &body)?;
    let mut s = svc.lock();
    if s.active {
        return Err(conflict("a trial is active"));
    }
    s.goal_px = Some(px.into());
    Ok(Json(s.clone()))
}

/// The remote centre sits a fixed distance up the current tool axis; the
/// click marks it in the view.
async fn post_rcm(State(svc): Shared, body: Bytes) -> Result<Json<SessionState>, ApiError> {
    let px = parse_click(&svc, &body)?;
    let mut s = svc.lock();
    if s.active {
        return Err(conflict("a trial is active"));
    }
    let g = &svc.tool_start;
    s.rcm_px = Some(px.into());
    s.rcm = Some((g.p + g.r.z_axis() * svc.cfg.rcm_distance).into());
    Ok(Json(s.clone()))
}

async fn post_start(State(svc): Shared) -> Result<(StatusCode, Json<SessionState>), ApiError> {
    let spec = {
        let mut s = svc.lock();
        if s.active {
            return Err(conflict("a trial is active"));
        }
        let (Some(goal), Some(rcm)) = (s.goal_px, s.rcm) else {
            return Err(conflict("set the goal and the RCM point first"));
        };
        s.active = true;
        s.stop_requested = false;
        s.phase = Phase::Idle;
        s.frame_id = None;
        TrialSpec { index: s.trials_run, eye: svc.opts.eye, seed: svc.opts.seed, goal_px: Some(goal), rcm: Some(rcm) }
    };
    svc.stop.store(false, Ordering::SeqCst);
    let runner = svc.clone();
    tokio::task::spawn_blocking(move || runner.run(spec));
    Ok((StatusCode::ACCEPTED, Json(svc.snapshot())))
}

async fn post_stop(State(svc): Shared) -> Result<Json<SessionState>, ApiError> {
    let mut s = svc.lock();
    if !s.active {
        return Err(conflict("no trial is active"));
    }
    s.stop_requested = true;
    svc.stop.store(true, Ordering::SeqCst);
    Ok(Json(s.clone()))
}

async fn stream(State(svc): Shared, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| client(svc, socket))
}

async fn client(svc: Arc<Service>, mut socket: WebSocket) {
    let mut rx = svc.frames.subscribe();
    svc.lock().clients += 1;
    let first = svc.latest.lock().unwrap_or_else(|e| e.into_inner()).clone();
    let mut open = match first {
        Some(m) => socket.send(Message::Text(m.as_ref().into())).await.is_ok(),
        None => true,
    };
    while open {
        tokio::select! {
            msg = rx.recv() => match msg {
                Ok(m) => open = socket.send(Message::Text(m.as_ref().into())).await.is_ok(),
                // Slow client: skip what it missed.
                Err(broadcast::error::RecvError::Lagged(_)) => {}
                Err(broadcast::error::RecvError::Closed) => open = false,
            },
            incoming = socket.recv() => {
                open = matches!(incoming, Some(Ok(m)) if !matches!(m, Message::Close(_)));
            }
        }
    }
    svc.lock().clients -= 1;
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/state", get(get_state))
        .route("/stream", get(stream))
        .route("/goal", post(post_goal))
        .route("/rcm", post(post_rcm))
        .route("/start", post(post_start))
        .route("/stop", post(post_stop))
        .with_state(svc)
}

pub async fn serve(cfg: RunConfig, opts: ServiceOptions, port: u16) -> anyhow::Result<()> {
    let svc = Service::new(cfg, opts)?;
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await.with_context(|| format!("binding port {port}"))?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
