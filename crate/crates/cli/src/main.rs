use std::process::ExitCode;

use anyhow::Context;
use cannula_cli::args::Cli;
use cannula_cli::offline::{detect_dir, write_verdicts};
use cannula_cli::output::{run_batch_to_dir, DumpOptions};
use cannula_cli::service::{serve, ServiceOptions};
use cannula_core::trial::{replay, Outcome};
use clap::Parser;

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let cfg = cli.run_config()?;

    if let Some(log) = &cli.replay {
        let text = std::fs::read_to_string(log).with_context(|| format!("reading {}", log.display()))?;
        let report = replay(&text, cli.gamma)?;
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(ExitCode::SUCCESS);
    }

    if let Some(dir) = &cli.detect_dir {
        let lines = detect_dir(&cfg, dir)?;
        std::fs::create_dir_all(&cli.out)?;
        let path = cli.out.join("verdicts.jsonl");
        write_verdicts(&path, &lines)?;
        let fired = lines.iter().find(|l| l.triggered).map(|l| l.tick);
        println!("{} frames, puncture verdict at tick {:?}, wrote {}", lines.len(), fired, path.display());
        return Ok(ExitCode::SUCCESS);
    }

    if cli.serve {
        let opts = ServiceOptions { eye: cli.seed, seed: cli.seed, speed: cli.speed, ..ServiceOptions::default() };
        let rt = tokio::runtime::Runtime::new()?;
        rt.block_on(serve(cfg, opts, cli.port))?;
        return Ok(ExitCode::SUCCESS);
    }

    let dump = DumpOptions { trajectories: cli.dump_traj, frame_stride: cli.dump_frames };
    let started = std::time::Instant::now();
    let out = run_batch_to_dir(&cfg, &cli.batch_spec(), &cli.out, dump, |run| {
        let r = &run.result;
        let status = match &r.outcome {
            Outcome::Completed => "completed".to_string(),
            Outcome::Aborted { cause } => format!("aborted: {}", serde_json::to_string(cause).unwrap_or_default()),
        };
        eprintln!(
            "trial {:>3} eye {:>3}: {status}, placement {} um, {:.1} s simulated",
            r.index,
            r.eye,
            r.final_xy_error_um.map_or("-".into(), |e| format!("{e:.1}")),
            r.duration_s
        );
    })?;
    print!("{}", std::fs::read_to_string(out.summary_path.with_extension("txt"))?);
    println!("wall time {:.1} s", started.elapsed().as_secs_f64());
    println!("summary {} sha256 {}", out.summary_path.display(), out.summary_sha256);
    if out.summary.stats.aborted > 0 && !cli.allow_abort {
        eprintln!("{} trial(s) aborted", out.summary.stats.aborted);
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
