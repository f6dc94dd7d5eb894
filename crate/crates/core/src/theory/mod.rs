//! Shallow single-head attention testbed with phase-modulated logits.
//!
//! Samples are sequences of noisy copies of `M` unit patterns. The first two
//! patterns are discriminative and the label is the majority among them.
//! Each token also carries a scalar phase; with the phase term enabled, the
//! attention logit between tokens `i` and `j` gains `f_a(cos(phi_i - phi_j))`.

mod data;
mod lemmas;
mod shallow;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{KopeError, Result};

pub use data::{gen_dataset, read_jsonl, write_jsonl, TheoryDataset, TheoryInstance};
pub use lemmas::{
    check_assumptions, concentration_threshold, sufficiency_trial, threshold_margin, verify_gap_lemma, GapReport,
    SetSizes, SufficiencyTrial,
};
pub use shallow::{
    hinge_loss_tape, hinge_sgd_train, shallow_evaluate, shallow_forward, steps_to_concentration, ShallowConfig,
    ShallowEval, ShallowModelParams, TraceRow, TrainOptions, TrainTrace,
};

/// The monotone gain `f_a(c) = lambda * c` applied to phase cosines.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseGain {
    pub lambda: f64,
}

impl Default for PhaseGain {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

impl PhaseGain {
    pub fn apply(&self, c: f64) -> f64 {
        self.lambda * c
    }
}

/// Clustered phase layout: tokens in the relevant cluster sit within
/// `epsilon / 2` of its center; every other token is at least
/// `delta_min` away from all of them; at most a fraction `xi` of the
/// label-relevant tokens sit outside the relevant cluster.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSpec {
    pub epsilon: f64,
    pub delta_min: f64,
    pub xi: f64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            delta_min: 2.0,
            xi: 0.1,
        }
    }
}

impl ClusterSpec {
    /// `cos(epsilon)`, the lowest same-cluster cosine.
    pub fn gamma(&self) -> f64 {
        self.epsilon.cos()
    }

    /// `cos(delta_min)`, the highest cross-cluster cosine.
    pub fn rho(&self) -> f64 {
        self.delta_min.cos()
    }

    /// Upper limit on `xi` for the given gain.
    pub fn xi_limit(&self, gain: &PhaseGain) -> f64 {
        1.0 - (-(gain.apply(self.gamma()) - gain.apply(self.rho()))).exp()
    }

    /// Checks the three cluster assumptions for `gain`.
    pub fn check(&self, gain: &PhaseGain) -> std::result::Result<(), String> {
        if !(0.0..PI / 2.0).contains(&self.epsilon) {
            return Err(format!("epsilon {} outside [0, pi/2)", self.epsilon));
        }
        if !(self.rho() < self.gamma()) {
            return Err(format!(
                "separation cos(delta_min) = {} is not below tightness cos(epsilon) = {}",
                self.rho(),
                self.gamma()
            ));
        }
        if !(self.xi >= 0.0 && self.xi < self.xi_limit(gain)) {
            return Err(format!(
                "misassignment fraction {} is not below {}",
                self.xi,
                self.xi_limit(gain)
            ));
        }
        Ok(())
    }

    /// Whether phases with this layout can be placed on the circle.
    pub fn validate_geometry(&self) -> Result<()> {
        if !(0.0..PI / 2.0).contains(&self.epsilon) || !(self.rho() < self.gamma()) {
            return Err(KopeError::Configuration(format!(
                "epsilon {} and delta_min {} do not separate clusters",
                self.epsilon, self.delta_min
            )));
        }
        if !(0.0..1.0).contains(&self.xi) {
            return Err(KopeError::Configuration(format!("xi {} outside [0, 1)", self.xi)));
        }
        if self.delta_min + self.epsilon / 2.0 > PI {
            return Err(KopeError::Configuration(format!(
                "delta_min + epsilon/2 = {} exceeds pi",
                self.delta_min + self.epsilon / 2.0
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoryDataConfig {
    /// Pattern count; the first two are discriminative.
    pub patterns: usize,
    pub dim: usize,
    /// Tokens per sample, excluding CLS.
    pub tokens: usize,
    /// Noise radius.
    pub tau: f64,
    /// Minimum distance between patterns.
    pub kappa: f64,
    pub alpha_star: f64,
    pub alpha_sharp: f64,
    pub samples: usize,
    #[serde(default)]
    pub cluster: ClusterSpec,
}

impl Default for TheoryDataConfig {
    fn default() -> Self {
        Self {
            patterns: 4,
            dim: 16,
            tokens: 10,
            tau: 0.1,
            kappa: 0.5,
            alpha_star: 0.5,
            alpha_sharp: 0.2,
            samples: 200,
            cluster: ClusterSpec::default(),
        }
    }
}

impl TheoryDataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KopeError::Configuration(m));
        if self.patterns < 3 {
            return bad(format!("need at least 3 patterns, got {}", self.patterns));
        }
        if self.dim == 0 || self.tokens == 0 || self.samples == 0 {
            return bad("dim, tokens and samples must be positive".into());
        }
        if !(self.tau >= 0.0 && self.tau < self.kappa / 4.0) {
            return bad(format!("noise radius {} must be in [0, kappa/4 = {})", self.tau, self.kappa / 4.0));
        }
        if !(self.alpha_star > 0.0 && self.alpha_sharp >= 0.0 && self.alpha_star + self.alpha_sharp <= 1.0) {
            return bad("alpha_star > 0, alpha_sharp >= 0 and their sum <= 1 required".into());
        }
        if self.alpha_star <= self.alpha_sharp {
            return bad("alpha_star must exceed alpha_sharp for a majority label".into());
        }
        Ok(())
    }
}
