//! Token-sequence classifiers: a plain ViT stack and its phase-coupled
//! counterpart, with cost counters and a checkpoint container.

mod checkpoint;
mod cost;
mod forward;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KopeError, Result};
use crate::kuramoto::KuramotoConfig;
use crate::phase_attention::{CouplingOptions, PhaseInitConfig, RotationPaths};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use cost::{count_flops, count_params, FlopCount, ParamCount};
pub use forward::{
    batch_loss_and_grads, forward, forward_tape, hinge_loss, initial_phases, BatchResult, ForwardTrace, LayerTrace,
    Loss, TapeOutput,
};
pub use params::{LayerParams, ModelParams, ModelVars};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vit,
    #[default]
    Kope,
    /// Phases keep their initial values; no Kuramoto steps.
    KopeFrozenPhase,
    /// Rotation on queries and keys only.
    KopeQkOnly,
    /// Phases enter attention without the subspace mixer.
    KopeNoMix,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Vit,
        Variant::Kope,
        Variant::KopeFrozenPhase,
        Variant::KopeQkOnly,
        Variant::KopeNoMix,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vit => "vit",
            Variant::Kope => "kope",
            Variant::KopeFrozenPhase => "kope_frozen_phase",
            Variant::KopeQkOnly => "kope_qk_only",
            Variant::KopeNoMix => "kope_no_mix",
        }
    }

    pub fn uses_phases(self) -> bool {
        self != Variant::Vit
    }

    pub fn steps_phases(self) -> bool {
        matches!(self, Variant::Kope | Variant::KopeQkOnly | Variant::KopeNoMix)
    }

    pub fn uses_mixer(self) -> bool {
        matches!(self, Variant::Kope | Variant::KopeFrozenPhase | Variant::KopeQkOnly)
    }

    pub fn paths(self) -> RotationPaths {
        match self {
            Variant::Vit => RotationPaths::NONE,
            Variant::KopeQkOnly => RotationPaths::QK_ONLY,
            _ => RotationPaths::ALL,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = KopeError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| KopeError::Configuration(format!("unknown variant {s:?}")))
    }
}

/// How the phases start before the first layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseInitMode {
    /// Multi-frequency 2D positional angles.
    #[default]
    Rotary2d,
    /// Every angle zero.
    Zero,
}

/// Which tokens feed the coupling of a layer's Kuramoto step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingTiming {
    /// Tokens after the block's attention and MLP update.
    #[default]
    PostUpdate,
    /// Tokens entering the block.
    PreUpdate,
}

fn default_mlp_ratio() -> usize {
    4
}
fn default_phase_base() -> f64 {
    10000.0
}
fn default_mixer_scale() -> f64 {
    1e-3
}
fn default_ln_eps() -> f64 {
    1e-6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// `(height, width)` of the token grid; the sequence adds one CLS token.
    pub grid: (usize, usize),
    /// Feature length of each raw input token.
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub kuramoto: KuramotoConfig,
    /// Stochastic depth rate. Accepted for configuration parity; the toy
    /// models always run the full depth.
    #[serde(default)]
    pub drop_path: f64,
    #[serde(default)]
    pub phase_init: PhaseInitMode,
    #[serde(default = "default_phase_base")]
    pub phase_base: f64,
    #[serde(default)]
    pub coupling_timing: CouplingTiming,
    #[serde(default)]
    pub coupling: CouplingOptions,
    /// Half-width of the uniform noise added to the identity mixer at init.
    #[serde(default = "default_mixer_scale")]
    pub mixer_scale: f64,
    #[serde(default = "default_ln_eps")]
    pub layernorm_eps: f64,
}

impl ModelConfig {
    /// A small configuration for the given grid and input size.
    pub fn toy(grid: (usize, usize), input_dim: usize, num_classes: usize, variant: Variant) -> Self {
        Self {
            depth: 2,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            grid,
            input_dim,
            num_classes,
            variant,
            kuramoto: KuramotoConfig::default(),
            drop_path: 0.0,
            phase_init: PhaseInitMode::Rotary2d,
            phase_base: default_phase_base(),
            coupling_timing: CouplingTiming::PostUpdate,
            coupling: CouplingOptions::default(),
            mixer_scale: default_mixer_scale(),
            layernorm_eps: default_ln_eps(),
        }
    }

    /// ViT-B/16 at 224 px with 1000 classes.
    pub fn vit_base(variant: Variant) -> Self {
        Self {
            depth: 12,
            width: 768,
            heads: 12,
            mlp_ratio: 4,
            grid: (14, 14),
            input_dim: 16 * 16 * 3,
            num_classes: 1000,
            ..Self::toy((14, 14), 768, 1000, variant)
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    /// Sequence length including CLS.
    pub fn tokens(&self) -> usize {
        1 + self.grid.0 * self.grid.1
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn pairs(&self) -> usize {
        self.head_dim() / 2
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    pub fn phase_init_config(&self) -> PhaseInitConfig {
        PhaseInitConfig {
            base: self.phase_base,
            grid: self.grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KopeError::Configuration(m));
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("depth, width, heads and mlp_ratio must be positive".into());
        }
        if self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dim {} must be even", self.head_dim()));
        }
        if self.variant.uses_phases() && self.phase_init == PhaseInitMode::Rotary2d && self.head_dim() % 4 != 0 {
            return bad(format!(
                "2D phase init needs head dim divisible by 4, got {}",
                self.head_dim()
            ));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 || self.input_dim == 0 || self.num_classes == 0 {
            return bad("grid, input_dim and num_classes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad(format!("drop_path {} outside [0, 1)", self.drop_path));
        }
        if !(self.mixer_scale >= 0.0) || !(self.layernorm_eps > 0.0) {
            return bad("mixer_scale must be >= 0 and layernorm_eps > 0".into());
        }
        self.kuramoto.validate()
    }
}
