//! Puncture detection over a directory of dumped frames.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cannula_core::config::RunConfig;
use cannula_core::frame::{Frame, GrayImage};
use cannula_core::perception::{JumpDetector, PunctureDetector, TipDetector};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::output::FrameIndexEntry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictLine {
    pub tick: u64,
    pub file: String,
    pub tip_px: Option<[f64; 2]>,
    pub p_vp: f64,
    pub triggered: bool,
}

/// Frame list from `index.jsonl`, or every `.pgm` in name order with ticks
/// counted from zero and no ground truth.
fn frame_list(dir: &Path) -> anyhow::Result<Vec<FrameIndexEntry>> {
    let index = dir.join("index.jsonl");
    if index.exists() {
        let text = fs::read_to_string(&index)?;
        return text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", index.display(), i + 1)))
            .collect();
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    files.sort();
    Ok(files
        .iter()
        .enumerate()
        .map(|(i, p)| FrameIndexEntry {
            tick: i as u64,
            file: p.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            truth_tip_px: None,
        })
        .collect())
}

/// Tracks the tip with the configured detector and feeds the puncture
/// detector frame by frame. Stride-1 dumps reproduce the live sampling.
pub fn detect_dir(cfg: &RunConfig, dir: &Path) -> anyhow::Result<Vec<VerdictLine>> {
    let entries = frame_list(dir)?;
    if entries.is_empty() {
        bail!("no frames in {}", dir.display());
    }
    let mut tips = TipDetector::new(cfg.perception.tip, 0);
    if let Some(seed) = entries.iter().find_map(|e| e.truth_tip_px) {
        tips.set_last(Vector2::from(seed));
    }
    let mut puncture = JumpDetector::new(cfg.perception.jump);
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let image = GrayImage::load(&dir.join(&e.file)).with_context(|| format!("reading {}", e.file))?;
        let frame = Frame {
            image,
            tick: e.tick,
            timestamp: e.tick as f64 / cfg.frame_rate,
            truth_tip_px: e.truth_tip_px.map(Vector2::from),
        };
        let tip = tips.detect(&frame, None).ok();
        let v = puncture.step(&frame, tip);
        out.push(VerdictLine { tick: e.tick, file: e.file, tip_px: tip.map(Into::into), p_vp: v.p_vp, triggered: v.triggered });
    }
    Ok(out)
}

pub fn write_verdicts(path: &Path, lines: &[VerdictLine]) -> anyhow::Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}
