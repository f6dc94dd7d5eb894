//! Run configuration, loaded from JSON with every field optional.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kope_core::model::{ModelConfig, Variant};
use kope_core::rng::RNG_ALGORITHM;
use kope_core::theory::{ClusterSpec, PhaseGain, ShallowConfig, TheoryDataConfig};
use kope_core::DType;
use serde::{Deserialize, Serialize};

use crate::blob::BlobConfig;
use crate::optim::OptimizerConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Gradcheck,
    VerifyLemmas,
    #[default]
    Train,
    SyncDynamics,
    Report,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Theory,
    #[default]
    Blob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub task: Task,
    pub rng_algorithm: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub steps: usize,
    pub batch: usize,
    /// Metrics are logged every this many steps (and at the first and last).
    pub trace_every: usize,
    pub out_dir: PathBuf,
    pub optimizer: OptimizerConfig,
    /// Blob-task model; a small default is derived from the blob grid when
    /// absent. Its `variant` is replaced by each run's variant.
    pub model: Option<ModelConfig>,
    pub blob: BlobSection,
    pub theory: TheorySection,
    pub gradcheck: GradcheckSection,
    pub lemmas: LemmaSection,
    pub sync: SyncSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Train,
            task: Task::Blob,
            rng_algorithm: RNG_ALGORITHM.to_string(),
            seeds: vec![0],
            variants: vec![Variant::Vit, Variant::Kope],
            steps: 600,
            batch: 32,
            trace_every: 10,
            out_dir: PathBuf::from("runs"),
            optimizer: OptimizerConfig::default(),
            model: None,
            blob: BlobSection::default(),
            theory: TheorySection::default(),
            gradcheck: GradcheckSection::default(),
            lemmas: LemmaSection::default(),
            sync: SyncSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobSection {
    pub data: BlobConfig,
    /// Validation accuracy that counts as converged.
    pub accuracy_target: f64,
    /// Validation samples traced for attention and phase metrics.
    pub probe: usize,
    /// Stop a run once the accuracy target is reached.
    pub stop_at_target: bool,
}

impl Default for BlobSection {
    fn default() -> Self {
        Self {
            data: BlobConfig::default(),
            accuracy_target: 0.9,
            probe: 16,
            stop_at_target: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheorySection {
    pub data: TheoryDataConfig,
    pub model: ShallowConfig,
    /// Plain SGD step size.
    pub lr: f64,
    /// Instances evaluated for the traced metrics.
    pub probe: usize,
    pub concentration_target: f64,
}

impl Default for TheorySection {
    fn default() -> Self {
        Self {
            data: TheoryDataConfig::default(),
            model: ShallowConfig::default(),
            lr: 0.1,
            probe: 64,
            concentration_target: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckSection {
    /// Random points per primitive.
    pub points: usize,
    pub dtype: DType,
    /// Random initializations per end-to-end model check.
    pub model_seeds: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            points: 100,
            dtype: DType::Double,
            model_seeds: 4,
        }
    }
}

fn default_specs() -> Vec<ClusterSpec> {
    [(0.2, 2.0, 0.1), (0.1, 2.5, 0.2), (0.4, 1.5, 0.05), (0.05, 3.0, 0.3), (0.3, 1.2, 0.0)]
        .into_iter()
        .map(|(epsilon, delta_min, xi)| ClusterSpec { epsilon, delta_min, xi })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LemmaSection {
    pub specs: Vec<ClusterSpec>,
    pub gain: PhaseGain,
    /// Gap-lemma instances per cluster spec.
    pub instances: usize,
    /// Random threshold constructions per cluster spec and phase setting.
    pub threshold_trials: usize,
    pub data: TheoryDataConfig,
}

impl Default for LemmaSection {
    fn default() -> Self {
        Self {
            specs: default_specs(),
            gain: PhaseGain::default(),
            instances: 1000,
            threshold_trials: 10_000,
            data: TheoryDataConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyncSection {
    /// Checkpoint to trace; defaults to the train output for the first seed
    /// and variant.
    pub checkpoint: Option<PathBuf>,
    /// Held-out samples traced.
    pub samples: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rng_algorithm != RNG_ALGORITHM {
            bail!("config asks for rng {:?}, this build provides {RNG_ALGORITHM:?}", self.rng_algorithm);
        }
        if self.seeds.is_empty() || self.variants.is_empty() {
            bail!("at least one seed and one variant required");
        }
        if self.batch == 0 || self.trace_every == 0 {
            bail!("batch and trace_every must be positive");
        }
        self.optimizer.validate()?;
        self.blob.data.validate()?;
        self.theory.data.validate()?;
        if self.task == Task::Theory {
            if let Some(v) = self.variants.iter().find(|v| !matches!(v, Variant::Vit | Variant::Kope)) {
                bail!("the theory task compares vit (no phase term) with kope (phase term); {v} has no counterpart");
            }
        }
        if let Some(m) = &self.model {
            m.validate()?;
        }
        Ok(())
    }

    /// Model configuration for the blob task and `variant`.
    pub fn blob_model(&self, variant: Variant) -> Result<ModelConfig> {
        let d = &self.blob.data;
        let cfg = match &self.model {
            Some(m) => {
                if m.grid != d.grid() || m.input_dim != d.token_dim() || m.num_classes != 2 {
                    bail!(
                        "model expects grid {:?}, input {} and {} classes; the blob task gives {:?}, {} and 2",
                        m.grid,
                        m.input_dim,
                        m.num_classes,
                        d.grid(),
                        d.token_dim()
                    );
                }
                m.with_variant(variant)
            }
            None => ModelConfig::toy(d.grid(), d.token_dim(), 2, variant),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
