use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use kope_core::kuramoto::order_parameter;
use kope_core::metrics::{entity_sync, gini, gini_reductions, sync_att_state, AttentionRow};
use kope_core::model::{batch_loss_and_grads, forward, save_checkpoint, ForwardTrace, Loss, ModelConfig, ModelParams, Variant};
use kope_core::theory::{gen_dataset, hinge_sgd_train, steps_to_concentration, ShallowModelParams, TrainOptions};
use kope_core::{Exec, KopeRng, Tensor};

use crate::blob::{gen_blob_data, gen_sample, BlobConfig, BlobData, BlobSample};
use crate::config::{RunConfig, Task};
use crate::log::MetricLog;
use crate::optim::Optimizer;

/// Losses above this count as divergence.
const DIVERGENCE_LOSS: f64 = 1e6;

/// First step at which one `(seed, variant)` run met its target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetHit {
    pub seed: u64,
    pub variant: Variant,
    pub step: Option<usize>,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub log: MetricLog,
    pub hits: Vec<TargetHit>,
    pub checkpoints: Vec<PathBuf>,
}

/// Median steps-to-target of one variant; runs that never hit count as
/// `censored_at`.
pub fn median_steps(hits: &[TargetHit], variant: Variant, censored_at: usize) -> Option<f64> {
    let mut s: Vec<usize> = hits
        .iter()
        .filter(|h| h.variant == variant)
        .map(|h| h.step.unwrap_or(censored_at))
        .collect();
    if s.is_empty() {
        return None;
    }
    s.sort_unstable();
    let n = s.len();
    Some(if n % 2 == 1 {
        s[n / 2] as f64
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2]) as f64
    })
}

pub fn checkpoint_path(dir: &Path, seed: u64, variant: Variant) -> PathBuf {
    dir.join(format!("checkpoint_seed{seed}_{variant}.kope"))
}

/// Everything one seed produced; `error` is set when a run stopped early.
struct SeedRun {
    log: MetricLog,
    hits: Vec<TargetHit>,
    checkpoints: Vec<PathBuf>,
    error: Option<anyhow::Error>,
}

/// Trains every variant on every seed. Seeds run as independent workers
/// under `exec`; their logs are merged by `(seed, step)`. With `out`, the
/// merged log is written to `out/metrics.csv` (also when a run diverged)
/// and blob runs leave one checkpoint each.
pub fn run_train(cfg: &RunConfig, out: Option<&Path>, exec: Exec) -> Result<TrainOutput> {
    cfg.validate()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let runs = exec.map_slice(&cfg.seeds, |&seed| {
        let mut run = SeedRun {
            log: MetricLog::new(),
            hits: Vec::new(),
            checkpoints: Vec::new(),
            error: None,
        };
        let res = match cfg.task {
            Task::Theory => theory_seed(cfg, seed, &mut run),
            Task::Blob => blob_seed(cfg, seed, out, &mut run),
        };
        run.error = res.err();
        run
    });
    let mut logs = Vec::with_capacity(runs.len());
    let mut hits = Vec::new();
    let mut checkpoints = Vec::new();
    let mut first_error = None;
    for r in runs {
        logs.push(r.log);
        hits.extend(r.hits);
        checkpoints.extend(r.checkpoints);
        if first_error.is_none() {
            first_error = r.error;
        }
    }
    let log = MetricLog::merge(logs)?;
    if let Some(dir) = out {
        log.save(&dir.join("metrics.csv"))?;
    }
    if let Some(e) = first_error {
        return Err(e.context("training aborted; partial log kept"));
    }
    Ok(TrainOutput { log, hits, checkpoints })
}

fn theory_seed(cfg: &RunConfig, seed: u64, run: &mut SeedRun) -> Result<()> {
    let t = &cfg.theory;
    let root = KopeRng::new(seed);
    let data = gen_dataset(&t.data, root.split(0).seed())?;
    let params = ShallowModelParams::init(&t.model, &data.patterns, t.data.tokens, root.split(1).seed())?;
    for &variant in &cfg.variants {
        let opts = TrainOptions {
            lr: t.lr,
            batch: cfg.batch,
            steps: cfg.steps,
            use_phase: variant == Variant::Kope,
            seed: root.split(2).seed(),
            trace_every: cfg.trace_every,
            probe: t.probe,
        };
        let (_, trace) = hinge_sgd_train(&params, &data.instances, &opts)?;
        let name = variant.as_str();
        for row in &trace.rows {
            let mut put = |m: &str, v: f64| run.log.push(row.step, seed, name, m, v);
            put("loss", row.loss)?;
            put("accuracy", row.accuracy)?;
            put("concentration", row.concentration)?;
            put("delta", row.delta)?;
            put("delta_a", row.delta_a)?;
            put("gini_cls", gini(&row.cls_attention)?)?;
        }
        run.hits.push(TargetHit {
            seed,
            variant,
            step: steps_to_concentration(&trace, t.concentration_target),
        });
    }
    Ok(())
}

fn inputs(samples: &[BlobSample], idx: &[usize]) -> (Vec<Tensor>, Vec<usize>) {
    idx.iter().map(|&i| (samples[i].tokens.clone(), samples[i].label)).unzip()
}

/// Validation loss and accuracy.
fn evaluate(params: &ModelParams, model: &ModelConfig, val: &[BlobSample], exec: Exec) -> Result<(f64, f64)> {
    let all: Vec<usize> = (0..val.len()).collect();
    let (xs, ys) = inputs(val, &all);
    let per = exec.try_map(xs.len(), |i| -> kope_core::Result<(f64, bool)> {
        let (l, _) = forward(params, model, &xs[i], false)?;
        let z = l.data();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let pred = (0..z.len()).fold(0, |b, k| if z[k] > z[b] { k } else { b });
        Ok((lse - z[ys[i]], pred == ys[i]))
    })?;
    let n = per.len() as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
    let acc = per.iter().filter(|p| p.1).count() as f64 / n;
    Ok((loss, acc))
}

/// Attention and phase readings averaged over probe samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbeMetrics {
    pub gini_cls: f64,
    pub gini_all: f64,
    /// CLS-weighted synchronization entering the last layer.
    pub sync_att_last: Option<f64>,
    /// Uniform order parameter entering each layer, then after the last.
    pub order: Vec<f64>,
    /// Entity synchronization of the final phases.
    pub entity_sync: Option<f64>,
}

fn cls_rows(attention: &[Tensor]) -> Result<Vec<AttentionRow>> {
    attention
        .iter()
        .map(|a| Ok(AttentionRow::new(a.row(0).to_vec())?))
        .collect()
}

/// `sync_att` of one traced layer, averaged over heads and subspaces.
pub fn layer_sync_att(trace: &ForwardTrace, layer: usize) -> Result<Option<f64>> {
    let l = &trace.layers[layer];
    match &l.phases {
        Some(st) => Ok(Some(sync_att_state(st, &cls_rows(&l.attention)?)?)),
        None => Ok(None),
    }
}

pub fn probe_metrics(
    params: &ModelParams,
    model: &ModelConfig,
    samples: &[BlobSample],
    blob: &BlobConfig,
) -> Result<ProbeMetrics> {
    let mut m = ProbeMetrics::default();
    let depth = model.depth;
    let mut order = vec![0.0; depth + 1];
    let (mut sync, mut ent) = (0.0, 0.0);
    let mut phased = false;
    for s in samples {
        let (_, trace) = forward(params, model, &s.tokens, true)?;
        let trace = trace.ok_or_else(|| anyhow!("forward returned no trace"))?;
        let last = &trace.layers[depth - 1];
        for a in &last.attention {
            let (c, all) = gini_reductions(a)?;
            m.gini_cls += c;
            m.gini_all += all;
        }
        if let Some(v) = layer_sync_att(&trace, depth - 1)? {
            phased = true;
            sync += v;
            for (l, layer) in trace.layers.iter().enumerate() {
                order[l] += order_parameter(layer.phases.as_ref().expect("phased layer"), None)?;
            }
            let fin = trace.final_phases.as_ref().expect("final phases");
            order[depth] += order_parameter(fin, None)?;
            ent += entity_sync(fin, &s.partition(blob))?;
        }
    }
    let n = samples.len() as f64;
    let heads = model.heads as f64;
    m.gini_cls /= n * heads;
    m.gini_all /= n * heads;
    if phased {
        m.sync_att_last = Some(sync / n);
        m.order = order.into_iter().map(|o| o / n).collect();
        m.entity_sync = Some(ent / n);
    }
    Ok(m)
}

fn log_blob_trace(
    run: &mut SeedRun,
    step: usize,
    seed: u64,
    variant: Variant,
    val: (f64, f64),
    train_loss: Option<f64>,
    probe: &ProbeMetrics,
) -> Result<()> {
    let name = variant.as_str();
    let log = &mut run.log;
    if let Some(l) = train_loss {
        log.push(step, seed, name, "loss", l)?;
    }
    log.push(step, seed, name, "val_loss", val.0)?;
    log.push(step, seed, name, "accuracy", val.1)?;
    log.push(step, seed, name, "gini_cls", probe.gini_cls)?;
    log.push(step, seed, name, "gini_all", probe.gini_all)?;
    if let Some(s) = probe.sync_att_last {
        log.push(step, seed, name, "sync_att_last", s)?;
    }
    for (l, o) in probe.order.iter().enumerate() {
        log.push(step, seed, name, &format!("order_layer{l}"), *o)?;
    }
    if let Some(e) = probe.entity_sync {
        log.push(step, seed, name, "entity_sync", e)?;
    }
    Ok(())
}

fn blob_seed(cfg: &RunConfig, seed: u64, out: Option<&Path>, run: &mut SeedRun) -> Result<()> {
    let b = &cfg.blob;
    let data: BlobData = gen_blob_data(&b.data, seed)?;
    let probe = &data.val[..b.probe.clamp(1, data.val.len())];
    for &variant in &cfg.variants {
        let model = cfg.blob_model(variant)?;
        // Same seed for every variant: shared tensors start identical.
        let mut params = ModelParams::init(&model, seed)?;
        let mut opt = Optimizer::new(cfg.optimizer, &params.tensors())?;
        // Batch draws depend only on the seed, so variants see the same data.
        let mut draws = KopeRng::new(seed).split(20);
        let val = evaluate(&params, &model, &data.val, Exec::Sequential)?;
        let pm = probe_metrics(&params, &model, probe, &b.data)?;
        log_blob_trace(run, 0, seed, variant, val, None, &pm)?;
        let mut hit = (val.1 >= b.accuracy_target).then_some(0);
        for step in 1..=cfg.steps {
            if hit.is_some() && b.stop_at_target {
                break;
            }
            let (xs, ys) = if data.train.is_empty() {
                let fresh = (0..cfg.batch)
                    .map(|_| gen_sample(&b.data, &mut draws))
                    .collect::<kope_core::Result<Vec<_>>>()?;
                inputs(&fresh, &(0..fresh.len()).collect::<Vec<_>>())
            } else {
                let idx: Vec<usize> = (0..cfg.batch).map(|_| draws.below(data.train.len())).collect();
                inputs(&data.train, &idx)
            };
            let r = batch_loss_and_grads(&params, &model, &xs, &ys, Loss::CrossEntropy, Exec::Sequential)?;
            if !r.loss.is_finite() || r.loss > DIVERGENCE_LOSS {
                run.log.push(step, seed, variant.as_str(), "loss", r.loss)?;
                return Err(anyhow!("{variant} seed {seed} diverged at step {step} (loss {})", r.loss));
            }
            opt.step(params.tensors_mut(), &r.grads)?;
            if step % cfg.trace_every == 0 || step == cfg.steps {
                let val = evaluate(&params, &model, &data.val, Exec::Sequential)?;
                let pm = probe_metrics(&params, &model, probe, &b.data)?;
                log_blob_trace(run, step, seed, variant, val, Some(r.loss), &pm)?;
                if hit.is_none() && val.1 >= b.accuracy_target {
                    hit = Some(step);
                }
            }
        }
        run.hits.push(TargetHit { seed, variant, step: hit });
        if let Some(dir) = out {
            let p = checkpoint_path(dir, seed, variant);
            save_checkpoint(&p, &model, &params)?;
            run.checkpoints.push(p);
        }
    }
    Ok(())
}
