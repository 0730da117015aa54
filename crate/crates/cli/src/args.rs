//! Command-line flags and their mapping onto the run configuration.

use std::path::PathBuf;

use anyhow::Context;
use cannula_core::batch::BatchSpec;
use cannula_core::config::RunConfig;
use clap::Parser;

/// Autonomous retinal vein cannulation simulator.
///
/// Without a mode flag, runs a batch of closed-loop trials and writes one
/// JSON-lines log per trial plus summary files into --out.
#[derive(Debug, Clone, Parser)]
#[command(name = "cannula", version)]
pub struct Cli {
    /// Base configuration (TOML). Flags below override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Number of trials in the batch.
    #[arg(long, default_value_t = 24)]
    pub trials: usize,

    /// Number of eyes (scene groups) the trials are spread over.
    #[arg(long, default_value_t = 4)]
    pub eyes: usize,

    /// Batch seed; every trial seed derives from it.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,

    /// Re-plan while moving (receding horizon). [default: off]
    #[arg(long, overrides_with = "no_mpc")]
    pub mpc: bool,

    /// Plan once per waypoint and track open loop.
    #[arg(long)]
    pub no_mpc: bool,

    /// Goal error tolerance alpha in pixels. [default: 1]
    #[arg(long, value_name = "PX")]
    pub alpha: Option<f64>,

    /// Jacobian update step size beta. [default: 0.5]
    #[arg(long)]
    pub beta: Option<f64>,

    /// Needle lowering distance eta in micrometres. [default: 40]
    #[arg(long, value_name = "UM")]
    pub eta: Option<f64>,

    /// Contact detection threshold gamma. [default: 0.18]
    #[arg(long)]
    pub gamma: Option<f64>,

    /// Number of trajectory waypoints N_traj. [default: 64]
    #[arg(long, value_name = "N")]
    pub ntraj: Option<usize>,

    /// Output directory for logs, summaries and dumps.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,

    /// Write every planned trajectory as a text table under <out>/traj.
    #[arg(long)]
    pub dump_traj: bool,

    /// Write every Nth frame of each trial as a binary graymap under <out>/frames.
    #[arg(long, value_name = "N")]
    pub dump_frames: Option<u64>,

    /// Exit successfully even if some trials aborted.
    #[arg(long)]
    pub allow_abort: bool,

    /// Re-run a trial log and check it reproduces tick for tick. With
    /// --gamma, re-run under that threshold and report the contact tick.
    #[arg(long, value_name = "LOG", conflicts_with_all = ["serve", "detect_dir"])]
    pub replay: Option<PathBuf>,

    /// Run the puncture detector over a directory of dumped frames and
    /// write a JSON-lines verdict log to <out>/verdicts.jsonl.
    #[arg(long, value_name = "DIR", conflicts_with = "serve")]
    pub detect_dir: Option<PathBuf>,

    /// Run the live operator service instead of a batch.
    #[arg(long)]
    pub serve: bool,

    /// Service port.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,

    /// Service pacing: simulated seconds per wall second, 0 for unpaced.
    #[arg(long, default_value_t = 1.0)]
    pub speed: f64,
}

impl Cli {
    /// Base config from --config (or defaults) with the flag overrides applied.
    pub fn run_config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.validate().context("invalid configuration")?;
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        if self.mpc {
            cfg.servo.mpc = true;
        }
        if self.no_mpc {
            cfg.servo.mpc = false;
        }
        if let Some(a) = self.alpha {
            cfg.servo.alpha_px = a;
        }
        if let Some(b) = self.beta {
            cfg.servo.broyden.beta = b;
        }
        if let Some(e) = self.eta {
            cfg.servo.eta = e * 1e-6;
        }
        if let Some(g) = self.gamma {
            cfg.perception.gamma = g;
        }
        if let Some(n) = self.ntraj {
            cfg.planner.n_traj = n;
        }
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec { trials: self.trials, eyes: self.eyes, seed: self.seed }
    }
}
