use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::KopeRng;

use super::data::{misassigned_count, RELEVANT_CLUSTER};
use super::{shallow_evaluate, ClusterSpec, PhaseGain, ShallowModelParams, TheoryInstance};

/// Slack for angle comparisons made on stored phases.
const ANGLE_TOL: f64 = 1e-12;

fn angle_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Checks the cluster assumptions on `spec` and on the instance's phases.
pub fn check_assumptions(inst: &TheoryInstance, spec: &ClusterSpec, gain: &PhaseGain) -> std::result::Result<(), String> {
    spec.check(gain)?;
    let n = inst.tokens.len();
    if inst.phases.len() != n || inst.cluster.len() != n {
        return Err("phases and cluster ids must cover every token".into());
    }
    if inst.cluster[0] != RELEVANT_CLUSTER {
        return Err("CLS must sit in the relevant cluster".into());
    }
    let inside: Vec<usize> = (0..n).filter(|&i| inst.cluster[i] == RELEVANT_CLUSTER).collect();
    let outside: Vec<usize> = (0..n).filter(|&i| inst.cluster[i] != RELEVANT_CLUSTER).collect();
    for &i in &inside {
        if angle_dist(inst.phases[i], inst.cluster_center) > spec.epsilon / 2.0 + ANGLE_TOL {
            return Err(format!("token {i} is farther than epsilon/2 from the cluster center"));
        }
        if i != 0 && !inst.s_star.contains(&i) {
            return Err(format!("token {i} is in the relevant cluster but not label-relevant"));
        }
    }
    for &i in &inside {
        for &j in &outside {
            if angle_dist(inst.phases[i], inst.phases[j]) < spec.delta_min - ANGLE_TOL {
                return Err(format!("tokens {i} and {j} are closer than delta_min across clusters"));
            }
        }
    }
    let missing = inst.s_star.len() - inst.s_star_hat().len();
    if missing > 0 && !((missing as f64) < spec.xi * inst.s_star.len() as f64) {
        return Err(format!(
            "{missing} of {} relevant tokens fall outside the cluster, not below xi = {}",
            inst.s_star.len(),
            spec.xi
        ));
    }
    if inst.s_star_hat().is_empty() || inst.s_other().is_empty() {
        return Err("the gap needs in-cluster relevant tokens and at least one other token".into());
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub delta: f64,
    pub delta_a: f64,
    /// `f_a(gamma) - f_a(rho)`.
    pub bound: f64,
    pub holds: bool,
    /// Why the assumptions do not hold, if they do not.
    pub precondition_failed: Option<String>,
}

/// Checks `delta_a - delta >= f_a(gamma) - f_a(rho)` (up to `1e-9`) for the
/// CLS logits of `params` on `inst`.
pub fn verify_gap_lemma(inst: &TheoryInstance, params: &ShallowModelParams, spec: &ClusterSpec) -> Result<GapReport> {
    let gain = params.gain;
    let bound = gain.apply(spec.gamma()) - gain.apply(spec.rho());
    if let Err(why) = check_assumptions(inst, spec, &gain) {
        return Ok(GapReport {
            delta: f64::NAN,
            delta_a: f64::NAN,
            bound,
            holds: false,
            precondition_failed: Some(why),
        });
    }
    let e = shallow_evaluate(params, inst, true)?;
    Ok(GapReport {
        delta: e.delta,
        delta_a: e.delta_a,
        bound,
        holds: e.delta_a - e.delta >= bound - 1e-9,
        precondition_failed: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetSizes {
    /// `|S*|`.
    pub star: usize,
    /// `|S not*|`.
    pub other: usize,
}

/// `f_a(gamma) - f_a(rho) + log(1 - xi)`: how far the phase term lowers the
/// content gap needed for concentration.
pub fn threshold_margin(gain: &PhaseGain, gamma: f64, rho: f64, xi: f64) -> f64 {
    gain.apply(gamma) - gain.apply(rho) + (1.0 - xi).ln()
}

/// Content gap sufficient for CLS attention mass `>= 1 - epsilon` on `S*`:
/// `log(|S not*| / |S*|) + log(1 / epsilon)`, lowered by
/// [`threshold_margin`] when the phase term is on.
pub fn concentration_threshold(
    sizes: SetSizes,
    epsilon: f64,
    xi: f64,
    gain: &PhaseGain,
    gamma: f64,
    rho: f64,
    phase_on: bool,
) -> f64 {
    let base = (sizes.other as f64 / sizes.star as f64).ln() + (1.0 / epsilon).ln();
    if phase_on {
        base - threshold_margin(gain, gamma, rho, xi)
    } else {
        base
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyTrial {
    pub sizes: SetSizes,
    pub epsilon: f64,
    pub spec: ClusterSpec,
    pub threshold: f64,
    /// Softmax mass on `S*`.
    pub mass: f64,
    pub holds: bool,
}

/// One random logit construction for `spec` meeting the sufficient gap
/// exactly.
///
/// With `phase_on`, content logits meet the shifted threshold on the
/// content gap and phase terms respect the cluster layout. Without it, the
/// logits themselves meet the threshold between in-cluster relevant tokens
/// and the rest. Half the trials pin every logit to its extreme.
pub fn sufficiency_trial(rng: &mut KopeRng, gain: &PhaseGain, spec: &ClusterSpec, phase_on: bool) -> SufficiencyTrial {
    let sizes = SetSizes {
        star: 1 + rng.below(10),
        other: 1 + rng.below(20),
    };
    let epsilon = rng.uniform_range(0.01, 0.5);
    let spec = *spec;
    let (gamma, rho) = (spec.gamma(), spec.rho());
    let extreme = rng.coin();
    let threshold = if phase_on {
        concentration_threshold(sizes, epsilon, spec.xi, gain, gamma, rho, true)
    } else {
        concentration_threshold(sizes, epsilon, spec.xi, gain, gamma, rho, false) - (1.0 - spec.xi).ln()
    };
    let hat = sizes.star - misassigned_count(spec.xi, sizes.star);
    let base = rng.uniform_range(-3.0, 3.0);
    let draw_above = |rng: &mut KopeRng, lo: f64| if extreme { lo } else { lo + rng.uniform_range(0.0, 2.0) };
    let mut logits = Vec::with_capacity(sizes.star + sizes.other);
    for i in 0..sizes.star {
        let in_cluster = i < hat;
        let content = if phase_on || in_cluster {
            if i == 0 {
                base + threshold
            } else {
                draw_above(rng, base + threshold)
            }
        } else {
            base - rng.uniform_range(0.0, 20.0)
        };
        let phase = if !phase_on {
            0.0
        } else if in_cluster {
            gain.apply(if extreme { gamma } else { rng.uniform_range(gamma, 1.0) })
        } else {
            gain.apply(if extreme { rho } else { rng.uniform_range(-1.0, rho) })
        };
        logits.push(content + phase);
    }
    for r in 0..sizes.other {
        let content = if r == 0 || extreme {
            base
        } else {
            base - rng.uniform_range(0.0, 2.0)
        };
        let phase = if phase_on {
            gain.apply(if extreme { rho } else { rng.uniform_range(-1.0, rho) })
        } else {
            0.0
        };
        logits.push(content + phase);
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|s| (s - mx).exp()).collect();
    let mass = e[..sizes.star].iter().sum::<f64>() / e.iter().sum::<f64>();
    SufficiencyTrial {
        sizes,
        epsilon,
        spec,
        threshold,
        mass,
        holds: mass >= 1.0 - epsilon,
    }
}
