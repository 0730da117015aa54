//! Batch runs written to an output directory.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use cannula_core::batch::{batch_stats, summary_table, BatchSpec, BatchSummary};
use cannula_core::config::RunConfig;
use cannula_core::trial::{run_trial_with, trial_log, TickControl, TrialRun, TrialSpec};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DumpOptions {
    pub trajectories: bool,
    /// Write every Nth frame.
    pub frame_stride: Option<u64>,
}

/// One line of a frame directory's `index.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct FrameIndexEntry {
    pub tick: u64,
    pub file: String,
    pub truth_tip_px: Option<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub summary: BatchSummary,
    pub summary_path: PathBuf,
    /// Hex SHA-256 of `summary.json`.
    pub summary_sha256: String,
}

pub fn trial_log_path(out: &Path, index: usize) -> PathBuf {
    out.join(format!("trial_{index:03}.jsonl"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn run_one(cfg: &RunConfig, spec: &TrialSpec, out: &Path, dump: DumpOptions) -> anyhow::Result<TrialRun> {
    let frames_dir = out.join("frames").join(format!("trial_{:03}", spec.index));
    let mut index = Vec::new();
    let mut io_error = None;
    if dump.frame_stride.is_some() {
        fs::create_dir_all(&frames_dir)?;
    }
    let run = run_trial_with(cfg, spec, |rec, frame| {
        if let Some(stride) = dump.frame_stride {
            if rec.tick % stride.max(1) == 0 && io_error.is_none() {
                let file = format!("frame_{:05}.pgm", rec.tick);
                match frame.image.save_pgm(&frames_dir.join(&file)) {
                    Ok(()) => index.push(FrameIndexEntry { tick: rec.tick, file, truth_tip_px: rec.truth_tip_px }),
                    Err(e) => io_error = Some(e),
                }
            }
        }
        if io_error.is_some() {
            TickControl::Stop
        } else {
            TickControl::Continue
        }
    })?;
    if let Some(e) = io_error {
        return Err(e).context("writing frame dump");
    }
    if dump.frame_stride.is_some() {
        let mut f = fs::File::create(frames_dir.join("index.jsonl"))?;
        for e in &index {
            writeln!(f, "{}", serde_json::to_string(e)?)?;
        }
    }
    if dump.trajectories {
        let dir = out.join("traj");
        fs::create_dir_all(&dir)?;
        for (tick, plan) in &run.plans {
            fs::write(dir.join(format!("trial_{:03}_tick_{tick:05}.txt", spec.index)), plan.to_table())?;
        }
    }
    Ok(run)
}

/// Runs the batch and writes `config.toml`, one log per trial,
/// `summary.json` and `summary.txt` into `out`.
pub fn run_batch_to_dir(
    cfg: &RunConfig,
    spec: &BatchSpec,
    out: &Path,
    dump: DumpOptions,
    mut progress: impl FnMut(&TrialRun),
) -> anyhow::Result<BatchOutput> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let mut results = Vec::with_capacity(spec.trials);
    for ts in spec.trial_specs() {
        let run = run_one(cfg, &ts, out, dump).with_context(|| format!("trial {}", ts.index))?;
        fs::write(trial_log_path(out, ts.index), trial_log(cfg, &ts, &run))?;
        progress(&run);
        results.push(run.result);
    }
    let summary = BatchSummary { spec: *spec, config: cfg.clone(), stats: batch_stats(&results), results };
    let json = serde_json::to_string_pretty(&summary)?;
    let summary_path = out.join("summary.json");
    fs::write(&summary_path, &json)?;
    fs::write(out.join("summary.txt"), summary_table(&summary))?;
    Ok(BatchOutput { summary_sha256: sha256_hex(json.as_bytes()), summary, summary_path })
}
