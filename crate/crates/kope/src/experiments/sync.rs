use std::path::PathBuf;

use anyhow::{anyhow, bail, Result};
use kope_core::metrics::entity_sync;
use kope_core::model::{forward, load_checkpoint, ModelConfig, ModelParams};

use crate::blob::{gen_blob_data, BlobSample};
use crate::config::RunConfig;
use crate::log::MetricLog;

use super::train::{checkpoint_path, layer_sync_att};

/// Per-layer readings averaged over samples. Index `l` is the state
/// entering layer `l`; entity synchronization has one extra entry for the
/// phases after the last layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SyncProfile {
    pub sync_att: Vec<f64>,
    pub entity_sync: Vec<f64>,
}

pub fn sync_profile(
    params: &ModelParams,
    model: &ModelConfig,
    samples: &[BlobSample],
    blob: &crate::blob::BlobConfig,
) -> Result<SyncProfile> {
    if !model.variant.uses_phases() {
        bail!("{} carries no phases to trace", model.variant);
    }
    if samples.is_empty() {
        bail!("no samples to trace");
    }
    let mut sync = vec![0.0; model.depth];
    let mut ent = vec![0.0; model.depth + 1];
    for s in samples {
        let (_, trace) = forward(params, model, &s.tokens, true)?;
        let trace = trace.ok_or_else(|| anyhow!("forward returned no trace"))?;
        let part = s.partition(blob);
        for (l, layer) in trace.layers.iter().enumerate() {
            sync[l] += layer_sync_att(&trace, l)?.unwrap_or(f64::NAN);
            ent[l] += entity_sync(layer.phases.as_ref().expect("phased layer"), &part)?;
        }
        ent[model.depth] += entity_sync(trace.final_phases.as_ref().expect("final phases"), &part)?;
    }
    let n = samples.len() as f64;
    Ok(SyncProfile {
        sync_att: sync.into_iter().map(|v| v / n).collect(),
        entity_sync: ent.into_iter().map(|v| v / n).collect(),
    })
}

/// Checkpoint named in the config, else the training output for the first
/// configured variant and `seed`.
pub fn resolve_checkpoint(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.sync
        .checkpoint
        .clone()
        .unwrap_or_else(|| checkpoint_path(&cfg.out_dir, seed, cfg.variants[0]))
}

/// Loads a checkpoint and traces it on held-out blob images drawn from
/// `seed`. The log uses the layer index as its step.
pub fn run_sync_dynamics(cfg: &RunConfig, seed: u64) -> Result<MetricLog> {
    let path = resolve_checkpoint(cfg, seed);
    let (model, params) = load_checkpoint(&path).map_err(|e| anyhow!("loading {}: {e}", path.display()))?;
    let d = &cfg.blob.data;
    if model.grid != d.grid() || model.input_dim != d.token_dim() || model.num_classes != 2 {
        bail!(
            "checkpoint {} was trained on grid {:?} with input {} and {} classes; the configured blob task has {:?}, {} and 2",
            path.display(),
            model.grid,
            model.input_dim,
            model.num_classes,
            d.grid(),
            d.token_dim()
        );
    }
    let data = gen_blob_data(d, seed)?;
    let n = if cfg.sync.samples == 0 { data.val.len() } else { cfg.sync.samples.min(data.val.len()) };
    let profile = sync_profile(&params, &model, &data.val[..n], d)?;
    let mut log = MetricLog::new();
    let name = model.variant.as_str();
    for (l, e) in profile.entity_sync.iter().enumerate() {
        if let Some(s) = profile.sync_att.get(l) {
            log.push(l, seed, name, "sync_att", *s)?;
        }
        log.push(l, seed, name, "entity_sync", *e)?;
    }
    Ok(log)
}
