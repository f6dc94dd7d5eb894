use anyhow::{bail, Result};
use kope_core::theory::{
    gen_dataset, sufficiency_trial, threshold_margin, verify_gap_lemma, ClusterSpec, GapReport, PhaseGain,
    ShallowConfig, ShallowModelParams, SufficiencyTrial, TheoryDataConfig, TheoryInstance,
};
use kope_core::{Exec, KopeRng};
use serde::Serialize;

use crate::config::RunConfig;

/// Instances sharing one random shallow model.
const INSTANCES_PER_MODEL: usize = 50;

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Counterexample {
    Gap { instance: Box<TheoryInstance>, report: GapReport },
    Threshold { phase_on: bool, trial: SufficiencyTrial },
}

#[derive(Clone, Debug, Serialize)]
pub struct LemmaReport {
    pub spec: ClusterSpec,
    pub gain: PhaseGain,
    /// Gap-lemma instances checked.
    pub trials: usize,
    pub passes: usize,
    /// `f_a(gamma) - f_a(rho) + log(1 - xi)`.
    pub margin: f64,
    pub threshold_trials: usize,
    pub threshold_passes: usize,
    pub counterexamples: Vec<Counterexample>,
}

impl LemmaReport {
    pub fn all_passed(&self) -> bool {
        self.passes == self.trials && self.threshold_passes == self.threshold_trials
    }
}

fn gap_sweep(
    spec: &ClusterSpec,
    gain: PhaseGain,
    data: &TheoryDataConfig,
    instances: usize,
    seed: u64,
    exec: Exec,
) -> Result<(usize, Vec<Counterexample>)> {
    let chunks = instances.div_ceil(INSTANCES_PER_MODEL);
    let root = KopeRng::new(seed);
    let results = exec.try_map(chunks, |c| -> kope_core::Result<Vec<(TheoryInstance, GapReport)>> {
        let mut rng = root.split(c as u64);
        let cfg = TheoryDataConfig {
            samples: INSTANCES_PER_MODEL.min(instances - c * INSTANCES_PER_MODEL),
            cluster: *spec,
            ..*data
        };
        let ds = gen_dataset(&cfg, rng.split(0).seed())?;
        let model = ShallowConfig {
            sigma: rng.uniform_range(0.0, 1.0),
            gain,
            ..ShallowConfig::default()
        };
        let params = ShallowModelParams::init(&model, &ds.patterns, cfg.tokens, rng.split(1).seed())?;
        ds.instances
            .into_iter()
            .map(|inst| verify_gap_lemma(&inst, &params, spec).map(|r| (inst, r)))
            .collect()
    })?;
    let mut passes = 0;
    let mut bad = Vec::new();
    for (inst, report) in results.into_iter().flatten() {
        if report.holds {
            passes += 1;
        } else {
            bad.push(Counterexample::Gap {
                instance: Box::new(inst),
                report,
            });
        }
    }
    Ok((passes, bad))
}

fn threshold_sweep(spec: &ClusterSpec, gain: PhaseGain, trials: usize, seed: u64) -> (usize, Vec<Counterexample>) {
    let mut passes = 0;
    let mut bad = Vec::new();
    for (k, phase_on) in [false, true].into_iter().enumerate() {
        let mut rng = KopeRng::new(seed).split(100 + k as u64);
        for _ in 0..trials {
            let t = sufficiency_trial(&mut rng, &gain, spec, phase_on);
            if t.holds {
                passes += 1;
            } else {
                bad.push(Counterexample::Threshold { phase_on, trial: t });
            }
        }
    }
    (passes, bad)
}

/// Gap-lemma and threshold sweeps, one report per configured cluster spec.
pub fn run_verify_lemmas(cfg: &RunConfig, seed: u64, exec: Exec) -> Result<Vec<LemmaReport>> {
    let l = &cfg.lemmas;
    let mut reports = Vec::with_capacity(l.specs.len());
    for (i, spec) in l.specs.iter().enumerate() {
        spec.validate_geometry()?;
        if let Err(why) = spec.check(&l.gain) {
            bail!("cluster spec {i} violates the assumptions: {why}");
        }
        let s = KopeRng::new(seed).split(i as u64).seed();
        let (passes, mut counterexamples) = gap_sweep(spec, l.gain, &l.data, l.instances, s, exec)?;
        let (threshold_passes, bad) = threshold_sweep(spec, l.gain, l.threshold_trials, s);
        counterexamples.extend(bad);
        reports.push(LemmaReport {
            spec: *spec,
            gain: l.gain,
            trials: l.instances,
            passes,
            margin: threshold_margin(&l.gain, spec.gamma(), spec.rho(), spec.xi),
            threshold_trials: 2 * l.threshold_trials,
            threshold_passes,
            counterexamples,
        });
    }
    Ok(reports)
}
