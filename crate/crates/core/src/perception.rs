//! Template matching, contact scoring, tip detection and the puncture cue.

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{Frame, GrayImage};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerceptionError {
    #[error("template has zero intensity variance")]
    DegenerateTemplate,
    #[error("template {tw}x{th} does not fit in search region {rw}x{rh}")]
    TemplateTooLarge { tw: u32, th: u32, rw: u32, rh: u32 },
    #[error("template window at ({x}, {y}) leaves the frame")]
    OutOfFrame { x: i64, y: i64 },
    #[error("reference peak score {0} must be positive")]
    NonPositiveReference(f64),
    #[error("tip not found (best score {score:.3})")]
    TipNotFound { score: f64 },
}

/// Inclusive-exclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: i64,
    pub y: i64,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn full(img: &GrayImage) -> Self {
        Rect { x: 0, y: 0, w: img.width, h: img.height }
    }

    /// Intersection with the image bounds.
    pub fn clip(&self, img: &GrayImage) -> Rect {
        let x0 = self.x.clamp(0, img.width as i64);
        let y0 = self.y.clamp(0, img.height as i64);
        let x1 = (self.x + self.w as i64).clamp(0, img.width as i64);
        let y1 = (self.y + self.h as i64).clamp(0, img.height as i64);
        Rect { x: x0, y: y0, w: (x1 - x0) as u32, h: (y1 - y0) as u32 }
    }
}

/// Appearance patch of the needle tip with the tip's offset inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub patch: GrayImage,
    /// Tip location relative to the patch's top-left corner.
    pub tip_offset: Vector2<f64>,
    sum: i64,
    /// n Σa² − (Σa)².
    spread: i64,
}

impl Template {
    pub fn new(patch: GrayImage, tip_offset: Vector2<f64>) -> Result<Self, PerceptionError> {
        let n = patch.pixels.len() as i64;
        let sum: i64 = patch.pixels.iter().map(|&a| a as i64).sum();
        let sq: i64 = patch.pixels.iter().map(|&a| (a as i64) * (a as i64)).sum();
        let spread = n * sq - sum * sum;
        if spread <= 0 {
            return Err(PerceptionError::DegenerateTemplate);
        }
        Ok(Template { patch, tip_offset, sum, spread })
    }

    /// Crops a `size × size` patch centred on `tip_px`.
    pub fn capture(frame: &GrayImage, tip_px: &Vector2<f64>, size: u32) -> Result<Self, PerceptionError> {
        let x0 = tip_px.x.round() as i64 - (size / 2) as i64;
        let y0 = tip_px.y.round() as i64 - (size / 2) as i64;
        let patch = frame
            .crop(x0, y0, size, size)
            .ok_or(PerceptionError::OutOfFrame { x: x0, y: y0 })?;
        Template::new(patch, Vector2::new(tip_px.x - x0 as f64, tip_px.y - y0 as f64))
    }

    pub fn width(&self) -> u32 {
        self.patch.width
    }

    pub fn height(&self) -> u32 {
        self.patch.height
    }
}

/// Correlation scores for every template placement inside a search region.
#[derive(Debug, Clone, PartialEq)]
pub struct NccResult {
    /// Top-left corner of the first placement in frame pixels.
    pub origin: (i64, i64),
    pub width: u32,
    pub height: u32,
    /// Row-major scores in `[-1, 1]`.
    pub scores: Vec<f64>,
    pub max: f64,
    /// Placement of the maximum, in frame pixels (top-left corner).
    pub argmax: (i64, i64),
}

impl NccResult {
    pub fn at(&self, x: u32, y: u32) -> f64 {
        self.scores[y as usize * self.width as usize + x as usize]
    }
}

/// Normalised cross-correlation of `tpl` against every placement fully inside `img`.
pub fn ncc_map(img: &GrayImage, tpl: &Template) -> Result<NccResult, PerceptionError> {
    ncc_map_roi(img, tpl, Rect::full(img))
}

/// Same as [`ncc_map`] restricted to placements whose window lies in `roi`.
///
/// The ROI is clipped to the image first. Windows with zero variance score 0.
pub fn ncc_map_roi(img: &GrayImage, tpl: &Template, roi: Rect) -> Result<NccResult, PerceptionError> {
    let roi = roi.clip(img);
    let (tw, th) = (tpl.width(), tpl.height());
    if tw > roi.w || th > roi.h {
        return Err(PerceptionError::TemplateTooLarge { tw, th, rw: roi.w, rh: roi.h });
    }
    let out_w = roi.w - tw + 1;
    let out_h = roi.h - th + 1;
    let n = (tw * th) as i64;
    let stride = img.width as usize;
    let mut scores = Vec::with_capacity((out_w * out_h) as usize);
    let mut best = (f64::NEG_INFINITY, (roi.x, roi.y));

    for oy in 0..out_h {
        for ox in 0..out_w {
            let x0 = (roi.x as u32 + ox) as usize;
            let y0 = (roi.y as u32 + oy) as usize;
            let (mut sb, mut sbb, mut sab) = (0i64, 0i64, 0i64);
            for ty in 0..th as usize {
                let row = &img.pixels[(y0 + ty) * stride + x0..(y0 + ty) * stride + x0 + tw as usize];
                let trow = &tpl.patch.pixels[ty * tw as usize..(ty + 1) * tw as usize];
                let (mut rb, mut rbb, mut rab) = (0u32, 0u32, 0u32);
                for (&b, &a) in row.iter().zip(trow) {
                    let (b, a) = (b as u32, a as u32);
                    rb += b;
                    rbb += b * b;
                    rab += a * b;
                }
                sb += rb as i64;
                sbb += rbb as i64;
                sab += rab as i64;
            }
            let window_spread = n * sbb - sb * sb;
            let score = if window_spread <= 0 {
                0.0
            } else {
                let num = (n * sab - tpl.sum * sb) as f64;
                (num / ((tpl.spread as f64).sqrt() * (window_spread as f64).sqrt())).clamp(-1.0, 1.0)
            };
            if score > best.0 {
                best = (score, (x0 as i64, y0 as i64));
            }
            scores.push(score);
        }
    }
    Ok(NccResult {
        origin: (roi.x, roi.y),
        width: out_w,
        height: out_h,
        scores,
        max: best.0,
        argmax: best.1,
    })
}

/// Peak placement refined by a parabola through the neighbours on each axis.
pub fn subpixel_peak(res: &NccResult) -> Vector2<f64> {
    let (ax, ay) = (res.argmax.0 - res.origin.0, res.argmax.1 - res.origin.1);
    let score = |x: i64, y: i64| -> Option<f64> {
        (x >= 0 && y >= 0 && x < res.width as i64 && y < res.height as i64).then(|| res.at(x as u32, y as u32))
    };
    let refine = |l: Option<f64>, c: f64, r: Option<f64>| match (l, r) {
        (Some(l), Some(r)) if l + r - 2.0 * c < 0.0 => (0.5 * (l - r) / (l + r - 2.0 * c)).clamp(-0.5, 0.5),
        _ => 0.0,
    };
    let c = res.max;
    Vector2::new(
        res.argmax.0 as f64 + refine(score(ax - 1, ay), c, score(ax + 1, ay)),
        res.argmax.1 as f64 + refine(score(ax, ay - 1), c, score(ax, ay + 1)),
    )
}

/// Search region of ±`radius` placements around the template position that
/// puts the tip at `tip_px`.
pub fn roi_around(tpl: &Template, tip_px: &Vector2<f64>, radius: u32) -> Rect {
    let x0 = (tip_px.x - tpl.tip_offset.x).round() as i64 - radius as i64;
    let y0 = (tip_px.y - tpl.tip_offset.y).round() as i64 - radius as i64;
    Rect {
        x: x0,
        y: y0,
        w: tpl.width() + 2 * radius,
        h: tpl.height() + 2 * radius,
    }
}

/// Relative drop of the peak correlation since the reference frame.
pub fn contact_score(reference_max: f64, current_max: f64) -> Result<f64, PerceptionError> {
    if !(reference_max > 0.0) {
        return Err(PerceptionError::NonPositiveReference(reference_max));
    }
    Ok((reference_max - current_max) / reference_max)
}

pub fn is_contact(score: f64, gamma: f64) -> bool {
    score >= gamma
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TipDetectorConfig {
    /// Ground-truth projection plus isotropic Gaussian pixel noise.
    Oracle { noise_px: f64 },
    /// Template tracking around the previous estimate.
    NccTracker { search_radius: u32, min_score: f64 },
}

impl Default for TipDetectorConfig {
    fn default() -> Self {
        TipDetectorConfig::Oracle { noise_px: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct TipDetector {
    config: TipDetectorConfig,
    rng: ChaCha8Rng,
    last: Option<Vector2<f64>>,
    /// Tracking template grabbed on the first frame, used until the caller
    /// supplies one.
    own: Option<Template>,
}

/// Side of the bootstrap tracking template.
const BOOTSTRAP_TEMPLATE: u32 = 64;

impl TipDetector {
    pub fn new(config: TipDetectorConfig, seed: u64) -> Self {
        TipDetector { config, rng: ChaCha8Rng::seed_from_u64(seed), last: None, own: None }
    }

    pub fn config(&self) -> &TipDetectorConfig {
        &self.config
    }

    /// Seeds the tracker's search centre.
    pub fn set_last(&mut self, tip_px: Vector2<f64>) {
        self.last = Some(tip_px);
    }

    /// Tip pixel estimate for `frame`. Without a template the tracker
    /// captures its own around the seeded or ground-truth tip on first use.
    pub fn detect(&mut self, frame: &Frame, template: Option<&Template>) -> Result<Vector2<f64>, PerceptionError> {
        match self.config {
            TipDetectorConfig::Oracle { noise_px } => {
                let truth = frame
                    .truth_tip_px
                    .filter(|p| frame.contains(p))
                    .ok_or(PerceptionError::TipNotFound { score: 0.0 })?;
                let noise = if noise_px > 0.0 {
                    let d = Normal::new(0.0, noise_px).expect("positive sigma");
                    Vector2::new(d.sample(&mut self.rng), d.sample(&mut self.rng))
                } else {
                    Vector2::zeros()
                };
                let est = truth + noise;
                self.last = Some(est);
                Ok(est)
            }
            TipDetectorConfig::NccTracker { search_radius, min_score } => {
                let centre = self
                    .last
                    .or(frame.truth_tip_px)
                    .ok_or(PerceptionError::TipNotFound { score: 0.0 })?;
                if template.is_none() && self.own.is_none() {
                    self.own = Some(Template::capture(&frame.image, &centre, BOOTSTRAP_TEMPLATE)?);
                }
                let tpl = template.or(self.own.as_ref()).expect("template present");
                let res = ncc_map_roi(&frame.image, tpl, roi_around(tpl, &centre, search_radius))?;
                if res.max < min_score {
                    return Err(PerceptionError::TipNotFound { score: res.max });
                }
                let est = subpixel_peak(&res) + tpl.tip_offset;
                self.last = Some(est);
                Ok(est)
            }
        }
    }
}

/// Output of a puncture detector for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorVerdict {
    /// Probability the tip is inside the vessel.
    pub p_vp: f64,
    /// Probability the tip is still outside, `1 - p_vp`.
    pub p_c: f64,
    pub triggered: bool,
}

impl DetectorVerdict {
    fn from_probability(p_vp: f64, triggered: bool) -> Self {
        let p_vp = p_vp.clamp(0.0, 1.0);
        DetectorVerdict { p_vp, p_c: 1.0 - p_vp, triggered }
    }
}

/// A frame-by-frame puncture classifier. Once triggered it stays triggered
/// until [`PunctureDetector::reset`].
pub trait PunctureDetector {
    fn step(&mut self, frame: &Frame, tip_px: Option<Vector2<f64>>) -> DetectorVerdict;
    fn reset(&mut self);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpDetectorParams {
    /// Frames per detector sample.
    pub stride: u32,
    /// Deviation from the recent motion that counts as a jump, in pixels.
    pub jump_thresh_px: f64,
    /// Extra samples the jump must persist for.
    pub persistence: u32,
}

impl Default for JumpDetectorParams {
    fn default() -> Self {
        JumpDetectorParams {
            stride: 4,
            // 25 µm at 136.33 px/mm.
            jump_thresh_px: 25e-3 * 136.33,
            persistence: 1,
        }
    }
}

/// Flags a sudden forward jump of the tip against its recent steady motion.
#[derive(Debug, Clone)]
pub struct JumpDetector {
    params: JumpDetectorParams,
    frames: u64,
    samples: Vec<Vector2<f64>>,
    /// Sample index of the candidate jump and the position before it.
    candidate: Option<(usize, Vector2<f64>)>,
    latched: bool,
    last_deviation: f64,
}

const BASELINE_SAMPLES: usize = 3;

impl JumpDetector {
    pub fn new(params: JumpDetectorParams) -> Self {
        JumpDetector {
            params,
            frames: 0,
            samples: Vec::new(),
            candidate: None,
            latched: false,
            last_deviation: 0.0,
        }
    }

    pub fn params(&self) -> &JumpDetectorParams {
        &self.params
    }

    /// Componentwise median of the displacements preceding sample `k`.
    fn baseline(&self, k: usize) -> Vector2<f64> {
        let lo = k.saturating_sub(BASELINE_SAMPLES).max(1);
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for j in lo..k {
            let d = self.samples[j] - self.samples[j - 1];
            xs.push(d.x);
            ys.push(d.y);
        }
        if xs.is_empty() {
            return Vector2::zeros();
        }
        Vector2::new(median(&mut xs), median(&mut ys))
    }

    fn verdict(&self) -> DetectorVerdict {
        if self.latched {
            return DetectorVerdict::from_probability(1.0, true);
        }
        let z = (self.last_deviation - self.params.jump_thresh_px) / (0.25 * self.params.jump_thresh_px);
        DetectorVerdict::from_probability(1.0 / (1.0 + (-z).exp()), false)
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

impl PunctureDetector for JumpDetector {
    fn step(&mut self, _frame: &Frame, tip_px: Option<Vector2<f64>>) -> DetectorVerdict {
        let on_stride = self.frames.is_multiple_of(self.params.stride.max(1) as u64);
        self.frames += 1;
        if self.latched || !on_stride {
            return self.verdict();
        }
        let Some(tip) = tip_px else {
            return self.verdict();
        };
        self.samples.push(tip);
        let k = self.samples.len() - 1;
        if k == 0 {
            return self.verdict();
        }
        let thresh = self.params.jump_thresh_px;
        match self.candidate {
            None => {
                let dev = (self.samples[k] - self.samples[k - 1] - self.baseline(k)).norm();
                self.last_deviation = dev;
                if dev > thresh {
                    if self.params.persistence == 0 {
                        self.latched = true;
                    } else {
                        self.candidate = Some((k, self.samples[k - 1]));
                    }
                }
            }
            Some((kc, before)) => {
                // The jump persists if the tip is still displaced from where
                // it was before, beyond what steady motion explains.
                let steps = (k - kc + 1) as f64;
                let dev = (self.samples[k] - before - self.baseline(kc) * steps).norm();
                self.last_deviation = dev;
                if dev > thresh {
                    if (k - kc) as u32 >= self.params.persistence {
                        self.latched = true;
                    }
                } else {
                    self.candidate = None;
                }
            }
        }
        self.verdict()
    }

    fn reset(&mut self) {
        *self = JumpDetector::new(self.params);
    }
}
