use serde::{Deserialize, Serialize};

use crate::error::{KopeError, Result};
use crate::kuramoto::{CouplingMatrix, PhaseState};
use crate::par::Exec;
use crate::phase_attention::{coupling_tape, init_phases, mix_head, rmhsa_tape};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::{CouplingTiming, ModelConfig, ModelParams, ModelVars, PhaseInitMode};

/// Phases entering the first layer, or `None` for the plain ViT.
pub fn initial_phases(config: &ModelConfig) -> Result<Option<PhaseState>> {
    if !config.variant.uses_phases() {
        return Ok(None);
    }
    Ok(Some(match config.phase_init {
        PhaseInitMode::Rotary2d => init_phases(&config.phase_init_config(), config.heads, config.head_dim())?,
        PhaseInitMode::Zero => PhaseState::synchronized(config.tokens(), config.heads, config.pairs(), 0.0),
    }))
}

/// Handles to everything a forward pass records.
pub struct TapeOutput {
    /// `[1, num_classes]` read from the CLS token.
    pub logits: Var,
    /// Per layer, per head attention.
    pub attention: Vec<Vec<Var>>,
    /// Per-head phase matrices entering each layer, plus the state after the
    /// last layer. Empty for the plain ViT.
    pub phases: Vec<Vec<Var>>,
    /// Per layer, per head coupling; empty when phases do not evolve.
    pub coupling: Vec<Vec<Var>>,
}

/// Records one sample's forward pass. `input` is `[grid cells, input_dim]`.
pub fn forward_tape(tape: &mut Tape, vars: &ModelVars, config: &ModelConfig, input: &Tensor) -> Result<TapeOutput> {
    let (n, f) = input.dims2()?;
    if n + 1 != config.tokens() || f != config.input_dim {
        return Err(KopeError::Dimension {
            op: "forward",
            detail: format!(
                "input is {n}x{f}, config expects {}x{}",
                config.tokens() - 1,
                config.input_dim
            ),
        });
    }
    let eps = config.layernorm_eps;
    let x = tape.leaf(input.clone());
    let e = tape.linear(x, vars.embed.0, Some(vars.embed.1))?;
    let z0 = tape.concat_rows(&[vars.cls, e])?;
    let mut z = tape.add(z0, vars.pos)?;

    let mut r: Vec<Var> = match initial_phases(config)? {
        Some(p) => (0..config.heads).map(|h| tape.leaf(p.head_matrix(h))).collect(),
        None => Vec::new(),
    };
    let gamma = vars.gamma_raw.map(|g| tape.softplus(g));
    let mut out = TapeOutput {
        logits: z,
        attention: Vec::with_capacity(config.depth),
        phases: Vec::new(),
        coupling: Vec::new(),
    };
    if !r.is_empty() {
        out.phases.push(r.clone());
    }

    for layer in &vars.layers {
        let mixed: Vec<Var> = match layer.mixer {
            Some(m) if !r.is_empty() => r
                .iter()
                .enumerate()
                .map(|(h, rh)| mix_head(tape, m, *rh, h, config.pairs()))
                .collect::<Result<_>>()?,
            _ => r.clone(),
        };
        let u = tape.layernorm(z, layer.ln1.0, layer.ln1.1, eps)?;
        let phases = (!mixed.is_empty()).then_some(mixed.as_slice());
        let att = rmhsa_tape(tape, u, phases, &layer.attn, config.variant.paths())?;
        out.attention.push(att.attention);
        let z1 = tape.add(z, att.output)?;
        let u2 = tape.layernorm(z1, layer.ln2.0, layer.ln2.1, eps)?;
        let [w1, b1, w2, b2] = layer.mlp;
        let hid = tape.linear(u2, w1, Some(b1))?;
        let hid = tape.relu(hid);
        let m = tape.linear(hid, w2, Some(b2))?;
        let z2 = tape.add(z1, m)?;

        if let (Some((hq, hk)), true) = (vars.coupling, config.variant.steps_phases()) {
            let src = match config.coupling_timing {
                CouplingTiming::PostUpdate => z2,
                CouplingTiming::PreUpdate => z,
            };
            let j = coupling_tape(tape, src, hq, hk, config.heads, config.coupling)?;
            let mut next = Vec::with_capacity(r.len());
            for (h, rh) in r.iter().enumerate() {
                let drive = tape.matmul(j[h], *rh)?;
                let p = tape.project(*rh, drive)?;
                let step = match gamma {
                    Some(g) => tape.scale_by(p, g)?,
                    None => tape.scale(p, config.kuramoto.gamma),
                };
                let moved = tape.add(*rh, step)?;
                next.push(tape.normalize_pairs(moved)?);
            }
            r = next;
            out.coupling.push(j);
            out.phases.push(r.clone());
        } else if !r.is_empty() {
            out.phases.push(r.clone());
        }
        z = z2;
    }

    let zf = tape.layernorm(z, vars.final_ln.0, vars.final_ln.1, eps)?;
    let cls = tape.slice_rows(zf, 0, 1)?;
    out.logits = tape.linear(cls, vars.head.0, Some(vars.head.1))?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// Row-stochastic attention per head.
    pub attention: Vec<Tensor>,
    /// Phases entering the layer (before mixing).
    pub phases: Option<PhaseState>,
    /// Coupling used for this layer's Kuramoto step.
    pub coupling: Option<CouplingMatrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    pub final_phases: Option<PhaseState>,
}

impl ForwardTrace {
    fn collect(tape: &Tape, out: &TapeOutput, config: &ModelConfig) -> Result<Self> {
        let values = |vs: &[Var]| vs.iter().map(|v| tape.value(*v).clone()).collect::<Vec<_>>();
        let state = |l: usize| -> Result<Option<PhaseState>> {
            out.phases
                .get(l)
                .map(|vs| PhaseState::from_head_matrices(&values(vs)))
                .transpose()
        };
        let mut layers = Vec::with_capacity(out.attention.len());
        for (l, att) in out.attention.iter().enumerate() {
            let coupling = out
                .coupling
                .get(l)
                .map(|vs| CouplingMatrix::from_head_matrices(&values(vs), config.coupling.axis))
                .transpose()?;
            layers.push(LayerTrace {
                attention: values(att),
                phases: state(l)?,
                coupling,
            });
        }
        Ok(Self {
            final_phases: state(out.attention.len())?,
            layers,
        })
    }
}

/// Logits `[1, num_classes]` for one sample, with the per-layer trace when
/// requested.
pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    input: &Tensor,
    trace: bool,
) -> Result<(Tensor, Option<ForwardTrace>)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = forward_tape(&mut tape, &vars, config, input)?;
    let t = if trace {
        Some(ForwardTrace::collect(&tape, &out, config)?)
    } else {
        None
    };
    Ok((tape.value(out.logits).clone(), t))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    CrossEntropy,
    /// `max(0, 1 - y (l_1 - l_0))` with `y = +1` for class 1; two classes only.
    Hinge,
}

pub fn hinge_loss(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let (_, c) = tape.value(logits).dims2()?;
    if c != 2 || label > 1 {
        return Err(KopeError::Parameter(format!(
            "hinge loss needs two classes and a 0/1 label, got {c} classes and label {label}"
        )));
    }
    let l0 = tape.slice_cols(logits, 0, 1)?;
    let l1 = tape.slice_cols(logits, 1, 1)?;
    let neg = tape.scale(l0, -1.0);
    let margin = tape.add(l1, neg)?;
    let y = if label == 1 { 1.0 } else { -1.0 };
    let m = tape.scale(margin, -y);
    let m = tape.add_scalar(m, 1.0);
    let h = tape.relu(m);
    Ok(tape.sum(h))
}

fn sample_loss(tape: &mut Tape, logits: Var, label: usize, loss: Loss) -> Result<Var> {
    match loss {
        Loss::CrossEntropy => tape.cross_entropy(logits, &[label]),
        Loss::Hinge => hinge_loss(tape, logits, label),
    }
}

pub struct BatchResult {
    pub loss: f64,
    pub correct: usize,
    /// Mean gradient per tensor, in [`ModelParams::named`] order.
    pub grads: Vec<Tensor>,
}

/// Mean loss and gradient over a batch. Samples run under `exec`; their
/// gradients are summed in sample order so results do not depend on it.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    config: &ModelConfig,
    inputs: &[Tensor],
    labels: &[usize],
    loss: Loss,
    exec: Exec,
) -> Result<BatchResult> {
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(KopeError::Parameter(format!(
            "{} inputs with {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let per_sample = exec.try_map(inputs.len(), |i| -> Result<(f64, bool, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let out = forward_tape(&mut tape, &vars, config, &inputs[i])?;
        let l = sample_loss(&mut tape, out.logits, labels[i], loss)?;
        let value = tape.value(l).data()[0];
        let grads = tape.backward(l)?;
        let g = vars
            .all
            .iter()
            .zip(params.tensors())
            .map(|(v, t)| grads.wrt(*v, t))
            .collect();
        let logits = tape.value(out.logits).data();
        let pred = argmax(logits);
        Ok((value, pred == labels[i], g))
    })?;
    let b = inputs.len() as f64;
    let mut total = 0.0;
    let mut correct = 0;
    let mut acc: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (l, ok, g) in per_sample {
        total += l;
        correct += ok as usize;
        for (a, gi) in acc.iter_mut().zip(&g) {
            for (x, y) in a.data_mut().iter_mut().zip(gi.data()) {
                *x += y;
            }
        }
    }
    for a in &mut acc {
        for x in a.data_mut() {
            *x /= b;
        }
    }
    Ok(BatchResult {
        loss: total / b,
        correct,
        grads: acc,
    })
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}
