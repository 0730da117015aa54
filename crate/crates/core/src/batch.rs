//! Multi-trial batches grouped by eye, with summary statistics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::trial::{run_trial, Outcome, TrialError, TrialResult, TrialRun, TrialSpec};

/// Published bench-top placement error (mean, max) in micrometres, printed
/// next to the simulated figures.
pub const REFERENCE_PLACEMENT_UM: (f64, f64) = (9.0, 16.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub trials: usize,
    pub eyes: usize,
    pub seed: u64,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec { trials: 24, eyes: 4, seed: 1 }
    }
}

impl BatchSpec {
    /// Consecutive trials share an eye; the seed fans out per trial.
    pub fn trial_specs(&self) -> Vec<TrialSpec> {
        let eyes = self.eyes.max(1);
        (0..self.trials)
            .map(|i| {
                let eye = (i * eyes / self.trials.max(1)) as u64;
                let seed = self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64 * 7919 + 17);
                TrialSpec::new(i, eye + self.seed.wrapping_mul(131), seed)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub max: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Stat> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        Some(Stat {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            n: v.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub trials: usize,
    pub completed: usize,
    pub aborted: usize,
    pub placement_um: Option<Stat>,
    pub contact_overshoot_um: Option<Stat>,
    pub early_contact_triggers: usize,
    pub early_puncture_triggers: usize,
    pub abs_dx_um: Option<Stat>,
    pub abs_dy_um: Option<Stat>,
    pub abs_dz_um: Option<Stat>,
    pub rcm_max_um: Option<Stat>,
    pub duration_s: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub spec: BatchSpec,
    pub config: RunConfig,
    pub results: Vec<TrialResult>,
    pub stats: BatchStats,
}

pub fn batch_stats(results: &[TrialResult]) -> BatchStats {
    let completed = results.iter().filter(|r| r.outcome == Outcome::Completed).count();
    let offset = |i: usize| Stat::of(results.iter().filter_map(|r| r.puncture_offset_um.map(|d| d[i].abs())));
    BatchStats {
        trials: results.len(),
        completed,
        aborted: results.len() - completed,
        placement_um: Stat::of(results.iter().filter_map(|r| r.final_xy_error_um)),
        contact_overshoot_um: Stat::of(results.iter().filter_map(|r| r.contact_overshoot_um)),
        early_contact_triggers: results.iter().filter(|r| r.early_contact_trigger).count(),
        early_puncture_triggers: results.iter().filter(|r| r.early_puncture_trigger).count(),
        abs_dx_um: offset(0),
        abs_dy_um: offset(1),
        abs_dz_um: offset(2),
        rcm_max_um: Stat::of(results.iter().map(|r| r.rcm_max_um)),
        duration_s: Stat::of(results.iter().map(|r| r.duration_s)),
    }
}

/// Runs every trial in order, handing each finished run to `each`.
pub fn run_batch(
    cfg: &RunConfig,
    spec: &BatchSpec,
    mut each: impl FnMut(&TrialSpec, &TrialRun),
) -> Result<BatchSummary, TrialError> {
    let mut results = Vec::with_capacity(spec.trials);
    for ts in spec.trial_specs() {
        let run = run_trial(cfg, &ts)?;
        each(&ts, &run);
        results.push(run.result);
    }
    Ok(BatchSummary { spec: *spec, config: cfg.clone(), stats: batch_stats(&results), results })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"))
}

/// Fixed-width text table of per-trial metrics and the aggregate line.
pub fn summary_table(summary: &BatchSummary) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:>3} {:>4} {:>10} {:>9} {:>10} {:>7} {:>7} {:>7} {:>7} {:>7}  outcome",
        "#", "eye", "place_um", "overshoot", "contact_t", "dx_um", "dy_um", "dz_um", "rcm_um", "time_s"
    )
    .unwrap();
    for r in &summary.results {
        let d = r.puncture_offset_um;
        let outcome = match &r.outcome {
            Outcome::Completed => "completed".to_string(),
            Outcome::Aborted { cause } => format!("aborted {}", serde_json::to_string(cause).unwrap_or_default()),
        };
        writeln!(
            s,
            "{:>3} {:>4} {:>10} {:>9} {:>10} {:>7} {:>7} {:>7} {:>7.1} {:>7.1}  {}",
            r.index,
            r.eye,
            opt(r.final_xy_error_um),
            opt(r.contact_overshoot_um),
            r.contact_tick.map_or("-".into(), |t| t.to_string()),
            opt(d.map(|d| d[0])),
            opt(d.map(|d| d[1])),
            opt(d.map(|d| d[2])),
            r.rcm_max_um,
            r.duration_s,
            outcome
        )
        .unwrap();
    }
    let st = &summary.stats;
    let fmt = |x: &Option<Stat>| x.map_or("-".to_string(), |s| format!("mean {:.1} max {:.1}", s.mean, s.max));
    writeln!(s, "completed {}/{}", st.completed, st.trials).unwrap();
    writeln!(s, "placement_um        {}", fmt(&st.placement_um)).unwrap();
    writeln!(
        s,
        "placement_um ref    mean {:.1} max {:.1}",
        REFERENCE_PLACEMENT_UM.0, REFERENCE_PLACEMENT_UM.1
    )
    .unwrap();
    writeln!(s, "contact_overshoot_um {}", fmt(&st.contact_overshoot_um)).unwrap();
    writeln!(s, "early triggers: contact {} puncture {}", st.early_contact_triggers, st.early_puncture_triggers).unwrap();
    writeln!(s, "|dx| um {}  |dy| um {}  |dz| um {}", fmt(&st.abs_dx_um), fmt(&st.abs_dy_um), fmt(&st.abs_dz_um)).unwrap();
    writeln!(s, "rcm_max_um          {}", fmt(&st.rcm_max_um)).unwrap();
    s
}
