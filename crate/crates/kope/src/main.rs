use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use kope::config::{Experiment, RunConfig};
use kope::experiments::{gradcheck, lemmas, report, sync, train};
use kope_core::model::Variant;
use kope_core::Exec;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "kope", version, about = "Kuramoto phase-encoded transformer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; defaults apply to every missing field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run this seed only.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run this variant only.
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Finite-difference check of every primitive and small end-to-end models.
    Gradcheck,
    /// Randomized sweeps over the attention-gap and concentration-threshold bounds.
    VerifyLemmas,
    /// Train the configured variants over the configured seeds.
    Train,
    /// Per-layer synchronization of a trained checkpoint.
    SyncDynamics,
    /// Parameter and multiply-accumulate counts.
    Report,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: kope_core::KopeError| e.to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.experiment = match cli.command {
        Command::Gradcheck => Experiment::Gradcheck,
        Command::VerifyLemmas => Experiment::VerifyLemmas,
        Command::Train => Experiment::Train,
        Command::SyncDynamics => Experiment::SyncDynamics,
        Command::Report => Experiment::Report,
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(v) = cli.variant {
        cfg.variants = vec![v];
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("run_config.json"), &cfg)?;
    let seed = cfg.seeds[0];

    match cli.command {
        Command::Gradcheck => {
            let r = gradcheck::run_gradcheck(&cfg, seed, None, Exec::Parallel)?;
            write_json(&out.join("gradcheck_report.json"), &r)?;
            println!("step {:e}, tolerance {:e}", r.step, r.tolerance);
            for p in &r.primitives {
                println!("{:<24} {:>4} points  max rel {:.3e}  {}", format!("{:?}", p.primitive), p.points, p.max_rel_error, verdict(p.passed));
            }
            for m in &r.models {
                println!("{:<24} {:>4} points  max rel {:.3e}  {}", m.name, m.points, m.max_rel_error, verdict(m.passed));
            }
            Ok(r.passed)
        }
        Command::VerifyLemmas => {
            let reports = lemmas::run_verify_lemmas(&cfg, seed, Exec::Parallel)?;
            write_json(&out.join("lemma_report.json"), &reports)?;
            for r in &reports {
                println!(
                    "eps {} delta_min {} xi {}: gap {}/{}  threshold {}/{}  margin {:.6}",
                    r.spec.epsilon, r.spec.delta_min, r.spec.xi, r.passes, r.trials, r.threshold_passes, r.threshold_trials, r.margin
                );
            }
            Ok(reports.iter().all(|r| r.all_passed()))
        }
        Command::Train => {
            let t = train::run_train(&cfg, Some(&out), Exec::Parallel)?;
            for h in &t.hits {
                match h.step {
                    Some(s) => println!("seed {} {}: target at step {s}", h.seed, h.variant),
                    None => println!("seed {} {}: target not reached", h.seed, h.variant),
                }
            }
            for &v in &cfg.variants {
                if let Some(m) = train::median_steps(&t.hits, v, cfg.steps + 1) {
                    println!("{v}: median steps to target {m}");
                }
            }
            println!("wrote {} rows to {}", t.log.len(), out.join("metrics.csv").display());
            Ok(true)
        }
        Command::SyncDynamics => {
            let log = sync::run_sync_dynamics(&cfg, seed)?;
            let path = out.join("sync_dynamics.csv");
            log.save(&path)?;
            for r in log.rows() {
                println!("layer {} {:<12} {:.6}", r.step, r.metric, r.value);
            }
            Ok(true)
        }
        Command::Report => {
            let rows = report::cost_grid(&cfg)?;
            write_json(&out.join("cost_report.json"), &rows)?;
            print!("{}", report::format_table(&rows));
            Ok(true)
        }
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
