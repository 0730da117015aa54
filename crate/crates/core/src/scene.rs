//! Synthetic retina, vein and needle with a top-down microscope camera.
//!
//! All lengths are metres in the robot base frame, with +z pointing up
//! towards the camera.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{Frame, GrayImage};
use crate::se3::{Pose, Rotation};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("point at depth {depth:.3e} m is behind the camera")]
    BehindCamera { depth: f64 },
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub width: u32,
    pub height: u32,
    /// Image scale at the working distance.
    pub px_per_mm: f64,
    pub working_distance: f64,
    /// Rotation of the image axes about the optical axis.
    pub yaw_deg: f64,
    /// Tilt of the optical axis away from the robot's z axis.
    pub tilt_deg: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            width: 640,
            height: 480,
            px_per_mm: 136.33,
            working_distance: 0.06,
            yaw_deg: 20.0,
            tilt_deg: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetinaConfig {
    /// Peak-to-peak height of the retinal relief.
    pub relief: f64,
    pub background_level: f64,
    pub texture_contrast: f64,
    /// Coarsest texture feature size.
    pub texture_scale: f64,
}

impl Default for RetinaConfig {
    fn default() -> Self {
        RetinaConfig {
            relief: 30e-6,
            background_level: 105.0,
            texture_contrast: 14.0,
            texture_scale: 400e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VeinConfig {
    pub radius: f64,
    /// Fraction of the diameter sunk below the retinal surface.
    pub embed: f64,
    pub darkness: f64,
    pub edge_softness: f64,
    /// Maximum angle between the vein and the needle heading.
    pub max_heading_deg: f64,
}

impl Default for VeinConfig {
    fn default() -> Self {
        VeinConfig {
            radius: 50e-6,
            embed: 0.4,
            darkness: 30.0,
            edge_softness: 20e-6,
            max_heading_deg: 25.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeedleConfig {
    pub tip_length: f64,
    /// Bend of the tip segment away from the shaft axis.
    pub tip_bend_deg: f64,
    pub tip_width: f64,
    pub shaft_width: f64,
    pub shaft_length: f64,
    pub intensity: f64,
    /// Sideways bow of the loaded tip per unit deflection.
    pub bow: f64,
}

impl Default for NeedleConfig {
    fn default() -> Self {
        NeedleConfig {
            tip_length: 180e-6,
            tip_bend_deg: 45.0,
            tip_width: 15e-6,
            shaft_width: 30e-6,
            shaft_length: 3e-3,
            intensity: 235.0,
            bow: 1.0,
        }
    }
}

impl NeedleConfig {
    /// Direction from the elbow to the tip in the tool frame, whose z axis
    /// runs up the shaft.
    pub fn tip_direction_body(&self) -> Vector3<f64> {
        let b = self.tip_bend_deg.to_radians();
        Vector3::new(b.sin(), 0.0, -b.cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContactConfig {
    /// Visible deflection per unit indentation.
    pub kappa: f64,
    /// Axial advance past first contact that starts the insertion phase.
    pub insert_advance: f64,
    pub puncture_mean: f64,
    pub puncture_std: f64,
    pub puncture_min: f64,
}

impl Default for ContactConfig {
    fn default() -> Self {
        ContactConfig {
            kappa: 0.6,
            insert_advance: 10e-6,
            puncture_mean: 60e-6,
            puncture_std: 15e-6,
            puncture_min: 30e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub camera: CameraConfig,
    pub retina: RetinaConfig,
    pub vein: VeinConfig,
    pub needle: NeedleConfig,
    pub contact: ContactConfig,
    /// Sensor noise standard deviation in gray levels.
    pub noise_sigma: f64,
    /// Range of the starting tip height above the goal.
    pub start_height: [f64; 2],
    /// Range of the starting horizontal tip offset from the goal.
    pub start_offset: [f64; 2],
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            camera: CameraConfig::default(),
            retina: RetinaConfig::default(),
            vein: VeinConfig::default(),
            needle: NeedleConfig::default(),
            contact: ContactConfig::default(),
            noise_sigma: 1.5,
            start_height: [150e-6, 300e-6],
            start_offset: [250e-6, 500e-6],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidConfig(m.to_string()));
        let c = &self.camera;
        if c.width < 64 || c.height < 64 {
            return bad("image must be at least 64x64");
        }
        if !(c.px_per_mm > 0.0 && c.working_distance > 0.0) {
            return bad("camera scale and working distance must be positive");
        }
        if !(self.vein.radius > 0.0 && (0.0..1.0).contains(&self.vein.embed)) {
            return bad("vein radius must be positive and embed in [0, 1)");
        }
        if !(self.contact.kappa >= 0.0 && self.contact.puncture_min > 0.0 && self.contact.puncture_std >= 0.0) {
            return bad("contact parameters out of range");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be non-negative");
        }
        for r in [self.start_height, self.start_offset] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return bad("start ranges must be positive and ordered");
            }
        }
        Ok(())
    }
}

/// Pinhole camera. The pose maps camera coordinates (x right, y down,
/// z along the optical axis) to the robot base frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub width: u32,
    pub height: u32,
    pub focal_px: f64,
    pub principal: Vector2<f64>,
    pub pose: Pose,
}

impl CameraModel {
    /// Camera whose optical axis passes through `look_at` from the
    /// configured working distance.
    pub fn looking_at(cfg: &CameraConfig, look_at: Vector3<f64>) -> Self {
        let flip = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let r = Rotation::rot_z(cfg.yaw_deg.to_radians())
            .compose(&Rotation::from_matrix_unchecked(flip))
            .compose(&Rotation::rot_x(cfg.tilt_deg.to_radians()));
        let centre = look_at - r.z_axis() * cfg.working_distance;
        CameraModel {
            width: cfg.width,
            height: cfg.height,
            focal_px: cfg.px_per_mm * 1e3 * cfg.working_distance,
            principal: Vector2::new(cfg.width as f64 / 2.0, cfg.height as f64 / 2.0),
            pose: Pose::new(centre, r),
        }
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.r.matrix().transpose() * (p - self.pose.p)
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, SceneError> {
        let c = self.to_camera(p);
        if c.z <= 0.0 {
            return Err(SceneError::BehindCamera { depth: c.z });
        }
        Ok(self.principal + Vector2::new(c.x, c.y) * (self.focal_px / c.z))
    }

    /// Point on the horizontal plane at height `z` seen through pixel `px`.
    pub fn back_project(&self, px: &Vector2<f64>, z: f64) -> Vector3<f64> {
        let d = (px - self.principal) / self.focal_px;
        let ray = self.pose.r.apply(&Vector3::new(d.x, d.y, 1.0));
        let t = (z - self.pose.p.z) / ray.z;
        self.pose.p + ray * t
    }

    /// Pixels per metre for lateral motion at the depth of `p`.
    pub fn scale_at(&self, p: &Vector3<f64>) -> f64 {
        self.focal_px / self.to_camera(p).z
    }
}

/// Retinal relief as a sum of plane waves around a base height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retina {
    pub base_z: f64,
    /// (kx, ky, phase, amplitude) per wave.
    pub waves: Vec<[f64; 4]>,
    pub texture_seed: u64,
}

impl Retina {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.base_z
            + self
                .waves
                .iter()
                .map(|[kx, ky, ph, a]| a * (kx * x + ky * y + ph).sin())
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vein {
    /// Horizontal centreline vertices.
    pub centreline: Vec<Vector2<f64>>,
    pub radius: f64,
    pub embed: f64,
}

impl Vein {
    /// Horizontal distance from `(x, y)` to the centreline.
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        let p = Vector2::new(x, y);
        self.centreline
            .windows(2)
            .map(|w| {
                let ab = w[1] - w[0];
                let t = ((p - w[0]).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
                (w[0] + ab * t - p).norm()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Height of the vessel wall's top above `(x, y)`, if over the vessel.
    pub fn top(&self, retina: &Retina, x: f64, y: f64) -> Option<f64> {
        let d = self.distance(x, y);
        (d < self.radius).then(|| {
            let centre = retina.height(x, y) + self.radius * (1.0 - 2.0 * self.embed);
            centre + (self.radius * self.radius - d * d).sqrt()
        })
    }
}

/// One sampled trial scene: anatomy, camera, goal and start position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub config: SceneConfig,
    pub retina: Retina,
    pub vein: Vein,
    pub camera: CameraModel,
    /// Goal on the vessel top.
    pub goal: Vector3<f64>,
    pub goal_px: Vector2<f64>,
    /// Horizontal start position of the tip; the tip starts at z = 0.
    pub start_xy: Vector2<f64>,
    pub puncture_depth: f64,
}

impl Scene {
    /// Samples a scene. `eye` fixes the anatomy texture and relief, `trial`
    /// the goal, start position, camera placement and puncture depth.
    pub fn sample(config: &SceneConfig, eye: u64, trial: u64) -> Result<Self, SceneError> {
        config.validate()?;
        let mut eye_rng = ChaCha8Rng::seed_from_u64(eye.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5eed);
        let mut rng = ChaCha8Rng::seed_from_u64(trial ^ eye.rotate_left(32));

        let mut waves = Vec::new();
        for _ in 0..3 {
            let wavelength = eye_rng.random_range(1.5e-3..4e-3);
            let dir = eye_rng.random_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU / wavelength;
            waves.push([
                k * dir.cos(),
                k * dir.sin(),
                eye_rng.random_range(0.0..std::f64::consts::TAU),
                config.retina.relief / 6.0,
            ]);
        }
        let texture_seed = eye_rng.random::<u64>();

        let goal_xy = Vector2::new(rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3));
        let offset_r = rng.random_range(config.start_offset[0]..=config.start_offset[1]);
        let offset_a = rng.random_range(0.0..std::f64::consts::TAU);
        let start_xy = goal_xy + Vector2::new(offset_a.cos(), offset_a.sin()) * offset_r;
        let start_height = rng.random_range(config.start_height[0]..=config.start_height[1]);

        // The needle heads along +x at the home pose; the vein runs roughly along it.
        let heading = rng.random_range(-1.0..1.0) * config.vein.max_heading_deg.to_radians();
        let along = Vector2::new(heading.cos(), heading.sin());
        let across = Vector2::new(-along.y, along.x);
        let bend = config.vein.radius * 2.0;
        let centreline = vec![
            goal_xy - along * 4e-3 + across * rng.random_range(-bend..bend),
            goal_xy,
            goal_xy + along * 4e-3 + across * rng.random_range(-bend..bend),
        ];
        let vein = Vein { centreline, radius: config.vein.radius, embed: config.vein.embed };

        let mut retina = Retina { base_z: 0.0, waves, texture_seed };
        let top0 = vein.top(&retina, goal_xy.x, goal_xy.y).expect("goal lies on the centreline");
        retina.base_z = -start_height - top0;
        let goal_z = -start_height;
        let goal = Vector3::new(goal_xy.x, goal_xy.y, goal_z);

        let look = goal + Vector3::new(rng.random_range(-3e-4..3e-4), rng.random_range(-3e-4..3e-4), 0.0);
        let camera = CameraModel::looking_at(&config.camera, look);
        let goal_px = camera.project(&goal)?;

        let c = &config.contact;
        let depth = if c.puncture_std > 0.0 {
            Normal::new(c.puncture_mean, c.puncture_std).expect("valid sigma").sample(&mut rng)
        } else {
            c.puncture_mean
        };

        Ok(Scene {
            config: *config,
            retina,
            vein,
            camera,
            goal,
            goal_px,
            start_xy,
            puncture_depth: depth.max(c.puncture_min),
        })
    }

    /// Tissue surface height at `(x, y)`.
    pub fn surface(&self, x: f64, y: f64) -> f64 {
        let h = self.retina.height(x, y);
        self.vein.top(&self.retina, x, y).map_or(h, |t| t.max(h))
    }

    /// Unit direction of the bent tip segment for a tool pose.
    pub fn tip_direction(&self, tool: &Pose) -> Vector3<f64> {
        tool.r.apply(&self.config.needle.tip_direction_body())
    }

    /// Metres per pixel at the goal depth, for reporting.
    pub fn metres_per_px(&self) -> f64 {
        1.0 / self.camera.scale_at(&self.goal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContactPhase {
    Free,
    InContact,
    Inserting,
    Punctured,
}

/// Tip-tissue interaction state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub phase: ContactPhase,
    /// Kinematic tip where the tissue was first touched.
    pub contact_point: Option<Vector3<f64>>,
    pub contact_tick: Option<u64>,
    pub puncture_point: Option<Vector3<f64>>,
    pub puncture_tick: Option<u64>,
    /// Visible tip offset from the kinematic tip.
    pub deflection: Vector3<f64>,
    pub indentation: f64,
    /// Kinematic tip of the last update.
    pub tip: Vector3<f64>,
    pub tip_dir: Vector3<f64>,
}

impl SceneState {
    pub fn new(scene: &Scene, tool: &Pose) -> Self {
        let mut s = SceneState {
            phase: ContactPhase::Free,
            contact_point: None,
            contact_tick: None,
            puncture_point: None,
            puncture_tick: None,
            deflection: Vector3::zeros(),
            indentation: 0.0,
            tip: tool.p,
            tip_dir: scene.tip_direction(tool),
        };
        s.update(scene, tool, 0);
        s
    }

    /// Visible tip position.
    pub fn visible_tip(&self) -> Vector3<f64> {
        self.tip + self.deflection
    }

    /// Axial advance of the kinematic tip past the first contact point.
    pub fn advance(&self) -> f64 {
        self.contact_point.map_or(0.0, |c| (self.tip - c).dot(&self.tip_dir))
    }

    /// Advances the contact mechanics to the new tool pose.
    pub fn update(&mut self, scene: &Scene, tool: &Pose, tick: u64) {
        let cfg = &scene.config.contact;
        self.tip = tool.p;
        self.tip_dir = scene.tip_direction(tool);
        self.indentation = (scene.surface(tool.p.x, tool.p.y) - tool.p.z).max(0.0);
        let back = {
            let h = Vector3::new(self.tip_dir.x, self.tip_dir.y, 0.0);
            if h.norm() > 1e-9 {
                -h.normalize()
            } else {
                Vector3::zeros()
            }
        };
        match self.phase {
            ContactPhase::Free => {
                if self.indentation > 0.0 {
                    self.phase = ContactPhase::InContact;
                    if self.contact_point.is_none() {
                        self.contact_point = Some(tool.p);
                        self.contact_tick = Some(tick);
                    }
                }
            }
            ContactPhase::InContact => {
                if self.indentation <= 0.0 {
                    self.phase = ContactPhase::Free;
                } else if self.advance() >= cfg.insert_advance {
                    self.phase = ContactPhase::Inserting;
                }
            }
            ContactPhase::Inserting => {
                if self.advance() >= scene.puncture_depth {
                    // Stored deflection is released as a forward surge.
                    let stored = self.deflection.norm();
                    self.phase = ContactPhase::Punctured;
                    self.puncture_point = Some(tool.p);
                    self.puncture_tick = Some(tick);
                    self.deflection = self.tip_dir * stored;
                    return;
                }
            }
            ContactPhase::Punctured => return,
        }
        self.deflection = match self.phase {
            ContactPhase::InContact | ContactPhase::Inserting => back * (cfg.kappa * self.indentation),
            _ => Vector3::zeros(),
        };
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Smooth lattice noise in [-1, 1].
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (xf, yf) = (x.floor(), y.floor());
    let (ix, iy) = (xf as i64, yf as i64);
    let lattice = |i: i64, j: i64| {
        let h = splitmix(seed ^ splitmix((i as u64).wrapping_mul(0x1_0000_0001) ^ (j as u64).rotate_left(21)));
        (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (s(x - xf), s(y - yf));
    let a = lattice(ix, iy) + (lattice(ix + 1, iy) - lattice(ix, iy)) * tx;
    let b = lattice(ix, iy + 1) + (lattice(ix + 1, iy + 1) - lattice(ix, iy + 1)) * tx;
    a + (b - a) * ty
}

const NOISE_TABLE: usize = 1 << 20;

/// Renders frames of a scene. The tissue background is computed once.
#[derive(Debug, Clone)]
pub struct Renderer {
    background: Vec<f32>,
    noise: Vec<f32>,
    noise_seed: u64,
    work: Vec<f32>,
}

/// Projected needle outline for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct NeedleSketch {
    pub tip_px: Vector2<f64>,
    pub elbow_px: Vector2<f64>,
    pub shaft_end_px: Vector2<f64>,
    pub bow_px: Vector2<f64>,
}

impl Renderer {
    pub fn new(scene: &Scene, noise_seed: u64) -> Self {
        let cam = &scene.camera;
        let (w, h) = (cam.width as usize, cam.height as usize);
        let rc = &scene.config.retina;
        let vc = &scene.config.vein;
        let seed = scene.retina.texture_seed;
        let mut background = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                let p = cam.back_project(&px, scene.goal.z);
                let mut tex = 0.0;
                let mut amp = 1.0;
                let mut scale = rc.texture_scale;
                for octave in 0..3u64 {
                    tex += amp * value_noise(seed.wrapping_add(octave), p.x / scale, p.y / scale);
                    amp *= 0.5;
                    scale *= 0.4;
                }
                let d = scene.vein.distance(p.x, p.y);
                let vessel = 0.5 * (1.0 - ((d - vc.radius) / vc.edge_softness.max(1e-9)).tanh());
                let level = rc.background_level + rc.texture_contrast * tex / 1.75 - vc.darkness * vessel;
                background.push(level as f32);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let sigma = scene.config.noise_sigma;
        let noise = if sigma > 0.0 {
            let d = Normal::new(0.0, sigma).expect("valid sigma");
            (0..NOISE_TABLE).map(|_| d.sample(&mut rng) as f32).collect()
        } else {
            vec![0.0; NOISE_TABLE]
        };
        Renderer {
            work: background.clone(),
            background,
            noise,
            noise_seed,
        }
    }

    /// Needle landmarks in pixels for the given tool pose and contact state.
    pub fn sketch(&self, scene: &Scene, tool: &Pose, state: &SceneState) -> Result<NeedleSketch, SceneError> {
        let n = &scene.config.needle;
        let cam = &scene.camera;
        let dir = scene.tip_direction(tool);
        let elbow = tool.p - dir * n.tip_length;
        let tip = state.visible_tip();
        let side = {
            let h = Vector3::new(-dir.y, dir.x, 0.0);
            if h.norm() > 1e-9 {
                h.normalize()
            } else {
                Vector3::x()
            }
        };
        let bent = state.phase != ContactPhase::Punctured;
        let bow = if bent { n.bow * state.deflection.norm() } else { 0.0 };
        // Quadratic Bezier control point that puts the midpoint `bow` aside.
        let control = (elbow + tip) * 0.5 + side * (2.0 * bow);
        Ok(NeedleSketch {
            tip_px: cam.project(&tip)?,
            elbow_px: cam.project(&elbow)?,
            shaft_end_px: cam.project(&(elbow + tool.r.z_axis() * n.shaft_length))?,
            bow_px: cam.project(&control)?,
        })
    }

    /// Renders one frame.
    pub fn render(&mut self, scene: &Scene, tool: &Pose, state: &SceneState, tick: u64) -> Result<Frame, SceneError> {
        let cam = &scene.camera;
        let (w, h) = (cam.width as usize, cam.height as usize);
        let sk = self.sketch(scene, tool, state)?;
        let n = &scene.config.needle;
        let scale = cam.scale_at(&tool.p);
        let tip_hw = 0.5 * n.tip_width * scale;
        let shaft_hw = 0.5 * n.shaft_width * scale;

        let mut tip_segs = Vec::with_capacity(8);
        let bez = |t: f64| {
            sk.elbow_px * ((1.0 - t) * (1.0 - t)) + sk.bow_px * (2.0 * t * (1.0 - t)) + sk.tip_px * (t * t)
        };
        for k in 0..8 {
            tip_segs.push((bez(k as f64 / 8.0), bez((k + 1) as f64 / 8.0)));
        }
        let shaft = (sk.elbow_px, sk.shaft_end_px);

        self.work.copy_from_slice(&self.background);
        let level = n.intensity as f32;
        let mut paint = |segs: &[(Vector2<f64>, Vector2<f64>)], hw: f64| {
            let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
            for (a, b) in segs {
                lo = lo.inf(a).inf(b);
                hi = hi.sup(a).sup(b);
            }
            let x0 = (lo.x - hw - 1.0).floor().max(0.0) as usize;
            let y0 = (lo.y - hw - 1.0).floor().max(0.0) as usize;
            let x1 = ((hi.x + hw + 1.0).ceil().max(0.0) as usize).min(w);
            let y1 = ((hi.y + hw + 1.0).ceil().max(0.0) as usize).min(h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                    let d = segs.iter().map(|(a, b)| segment_distance(&p, a, b)).fold(f64::INFINITY, f64::min);
                    let cover = (hw + 0.5 - d).clamp(0.0, 1.0) as f32;
                    if cover > 0.0 {
                        let v = &mut self.work[y * w + x];
                        *v += (level - *v) * cover;
                    }
                }
            }
        };
        paint(&[shaft], shaft_hw);
        paint(&tip_segs, tip_hw);

        let offset = (splitmix(self.noise_seed ^ splitmix(tick)) as usize) % NOISE_TABLE;
        let mut pixels = Vec::with_capacity(w * h);
        for (i, v) in self.work.iter().enumerate() {
            let noisy = v + self.noise[(i + offset) % NOISE_TABLE];
            pixels.push(noisy.round().clamp(0.0, 255.0) as u8);
        }
        Ok(Frame {
            image: GrayImage { width: cam.width, height: cam.height, pixels },
            tick,
            timestamp: tick as f64 / 30.0,
            truth_tip_px: Some(sk.tip_px),
        })
    }
}

fn segment_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let l2 = ab.norm_squared();
    let t = if l2 > 0.0 { ((p - a).dot(&ab) / l2).clamp(0.0, 1.0) } else { 0.0 };
    (a + ab * t - p).norm()
}
