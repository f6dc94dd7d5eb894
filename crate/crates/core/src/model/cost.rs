use serde::{Deserialize, Serialize};

use super::{ModelConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    /// Parameters of the same configuration without any phase machinery.
    pub base: usize,
    /// Coupling maps, mixers and a learned step size, when present.
    pub kope_overhead: usize,
    pub overhead_fraction: f64,
}

/// Closed-form parameter count; agrees with [`super::ModelParams::num_params`].
pub fn count_params(config: &ModelConfig) -> ParamCount {
    let (d, h) = (config.width, config.hidden());
    let embed = config.input_dim * d + d + d + config.tokens() * d;
    let layer = 4 * d + 4 * (d * d + d) + d * h + h + h * d + d;
    let head = 2 * d + d * config.num_classes + config.num_classes;
    let base = embed + config.depth * layer + head;
    let v = config.variant;
    let mut overhead = 0;
    if v.uses_mixer() {
        overhead += config.depth * config.heads * config.pairs() * config.pairs();
    }
    if v.steps_phases() {
        overhead += 2 * d * d;
        if config.kuramoto.gamma_learnable {
            overhead += 1;
        }
    }
    ParamCount {
        total: base + overhead,
        base,
        kope_overhead: overhead,
        overhead_fraction: overhead as f64 / base as f64,
    }
}

/// Multiply-accumulate counts per image. Each multiply-accumulate counts as
/// one operation, the convention behind the usual "17.6G" ViT-B/16 figure.
/// Layer norms, softmax exponentials and residual additions are not counted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopCount {
    pub vit_flops: f64,
    /// Cost of `config.variant`; equal to `vit_flops` for the plain ViT.
    pub kope_flops: f64,
    pub ratio: f64,
}

pub fn count_flops(config: &ModelConfig) -> FlopCount {
    let t = config.tokens() as f64;
    let d = config.width as f64;
    let h = config.hidden() as f64;
    let n = (config.tokens() - 1) as f64;
    let dh = config.head_dim() as f64;
    let layers = config.depth as f64;

    let embed = n * config.input_dim as f64 * d;
    let attn = 4.0 * t * d * d + 2.0 * t * t * d;
    let mlp = 2.0 * t * d * h;
    let head = d * config.num_classes as f64;
    let vit = embed + layers * (attn + mlp) + head;

    let v = config.variant;
    let mut extra = 0.0;
    if v.uses_phases() {
        // Each pair rotation is two multiply-adds per coordinate.
        let rotations = if v == Variant::KopeQkOnly { 2.0 } else { 4.0 };
        extra += rotations * 2.0 * t * d;
    }
    if v.uses_mixer() {
        // Per head: a P x P mix of both pair coordinates for every token.
        extra += t * d * dh / 2.0;
    }
    if v.steps_phases() {
        let projections = 2.0 * t * d * d;
        let logits = t * t * d;
        let drive = t * t * d;
        // Tangent projection (dot product and subtraction) and renormalization.
        let update = 3.0 * t * d;
        extra += projections + logits + drive + update;
    }
    let kope = vit + layers * extra;
    FlopCount {
        vit_flops: vit,
        kope_flops: kope,
        ratio: kope / vit,
    }
}
