use crate::error::{KopeError, Result};
use crate::phase_attention::{AttentionVars, CouplingParams, PhaseMixer, RotaryAttentionParams};
use crate::rng::KopeRng;
use crate::tape::{inverse_softplus, softplus, Tape, Var};
use crate::tensor::Tensor;

use super::ModelConfig;

/// Stream of the model RNG reserved for phase-specific parameters, so the
/// shared weights are identical across variants for one seed.
const PHASE_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub attn: RotaryAttentionParams,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
    pub mixer: Option<PhaseMixer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub cls: Tensor,
    pub pos: Tensor,
    pub layers: Vec<LayerParams>,
    /// Shared by every layer.
    pub coupling: Option<CouplingParams>,
    /// Pre-softplus step size, present when the step size is learned.
    pub gamma_raw: Option<Tensor>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut KopeRng) -> Tensor {
    Tensor::new(vec![rows, cols], rng.normal_vec(rows * cols, std)).expect("shape")
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = KopeRng::new(seed);
        let mut extra = rng.split(PHASE_STREAM);
        let (d, h, n) = (config.width, config.hidden(), config.tokens());
        let embed_w = gaussian(config.input_dim, d, 1.0 / (config.input_dim as f64).sqrt(), &mut rng);
        let cls = gaussian(1, d, 0.02, &mut rng);
        let pos = gaussian(n, d, 0.02, &mut rng);
        let mut layers = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let attn = RotaryAttentionParams::init(d, config.heads, &mut rng)?;
            let mlp_w1 = gaussian(d, h, 1.0 / (d as f64).sqrt(), &mut rng);
            let mlp_w2 = gaussian(h, d, 1.0 / (h as f64).sqrt(), &mut rng);
            let mixer = config
                .variant
                .uses_mixer()
                .then(|| PhaseMixer::near_identity(config.heads, config.pairs(), config.mixer_scale, &mut extra));
            layers.push(LayerParams {
                ln1_gain: Tensor::filled(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                attn,
                ln2_gain: Tensor::filled(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                mlp_w1,
                mlp_b1: Tensor::zeros(&[h]),
                mlp_w2,
                mlp_b2: Tensor::zeros(&[d]),
                mixer,
            });
        }
        let head_w = gaussian(d, config.num_classes, 1.0 / (d as f64).sqrt(), &mut rng);
        let coupling = if config.variant.steps_phases() {
            Some(CouplingParams::init(d, &mut extra)?)
        } else {
            None
        };
        let gamma_raw = (config.variant.steps_phases() && config.kuramoto.gamma_learnable)
            .then(|| Tensor::scalar(inverse_softplus(config.kuramoto.gamma)));
        Ok(Self {
            embed_w,
            embed_b: Tensor::zeros(&[d]),
            cls,
            pos,
            layers,
            coupling,
            gamma_raw,
            final_gain: Tensor::filled(&[d], 1.0),
            final_bias: Tensor::zeros(&[d]),
            head_w,
            head_b: Tensor::zeros(&[config.num_classes]),
        })
    }

    /// Every tensor with a stable name, in declaration order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed_w".into(), &self.embed_w),
            ("embed_b".into(), &self.embed_b),
            ("cls".into(), &self.cls),
            ("pos".into(), &self.pos),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let a = &l.attn;
            let fields: [(&str, &Tensor); 14] = [
                ("ln1_gain", &l.ln1_gain),
                ("ln1_bias", &l.ln1_bias),
                ("w_q", &a.w_q),
                ("b_q", &a.b_q),
                ("w_k", &a.w_k),
                ("b_k", &a.b_k),
                ("w_v", &a.w_v),
                ("b_v", &a.b_v),
                ("w_o", &a.w_o),
                ("b_o", &a.b_o),
                ("ln2_gain", &l.ln2_gain),
                ("ln2_bias", &l.ln2_bias),
                ("mlp_w1", &l.mlp_w1),
                ("mlp_b1", &l.mlp_b1),
            ];
            out.extend(fields.into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
            out.push((format!("layers.{i}.mlp_w2"), &l.mlp_w2));
            out.push((format!("layers.{i}.mlp_b2"), &l.mlp_b2));
            if let Some(m) = &l.mixer {
                out.push((format!("layers.{i}.mixer"), &m.mix));
            }
        }
        if let Some(c) = &self.coupling {
            out.push(("coupling.h_q".into(), &c.h_q));
            out.push(("coupling.h_k".into(), &c.h_k));
        }
        if let Some(g) = &self.gamma_raw {
            out.push(("gamma_raw".into(), g));
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("final_bias".into(), &self.final_bias));
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embed_w, &mut self.embed_b, &mut self.cls, &mut self.pos];
        for l in &mut self.layers {
            out.push(&mut l.ln1_gain);
            out.push(&mut l.ln1_bias);
            out.extend(l.attn.tensors_mut());
            out.push(&mut l.ln2_gain);
            out.push(&mut l.ln2_bias);
            out.push(&mut l.mlp_w1);
            out.push(&mut l.mlp_b1);
            out.push(&mut l.mlp_w2);
            out.push(&mut l.mlp_b2);
            if let Some(m) = &mut l.mixer {
                out.push(&mut m.mix);
            }
        }
        if let Some(c) = &mut self.coupling {
            out.push(&mut c.h_q);
            out.push(&mut c.h_k);
        }
        if let Some(g) = &mut self.gamma_raw {
            out.push(g);
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Current step size: the softplus of the raw parameter when learned.
    pub fn gamma(&self, config: &ModelConfig) -> f64 {
        match &self.gamma_raw {
            Some(g) => softplus(g.data()[0]),
            None => config.kuramoto.gamma,
        }
    }

    /// Checks tensor count and shapes against a fresh initialization.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let template = Self::init(config, 0)?;
        let (a, b) = (self.named(), template.named());
        if a.len() != b.len() {
            return Err(KopeError::Configuration(format!(
                "{} parameter tensors, config expects {}",
                a.len(),
                b.len()
            )));
        }
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(KopeError::Configuration(format!(
                    "parameter {na} {:?} does not match expected {nb} {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Tensors in [`ModelParams::named`] order as they go on a tape: mixers
    /// in their stacked `[heads * P, P]` form, everything else unchanged.
    pub fn leaf_values(&self) -> Vec<Tensor> {
        self.tensors()
            .into_iter()
            .map(|t| match t.shape() {
                [h, p, q] => t.reshape(vec![h * p, *q]).expect("mixer shape"),
                _ => t.clone(),
            })
            .collect()
    }

    /// Records every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let all = self.leaf_values().into_iter().map(|t| tape.leaf(t)).collect();
        self.assemble(all)
    }

    /// Structures leaves already on a tape, given in [`ModelParams::leaf_values`] order.
    pub fn assemble(&self, all: Vec<Var>) -> ModelVars {
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("parameter order");
        let embed_w = next();
        let embed_b = next();
        let cls = next();
        let pos = next();
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let ln1 = (next(), next());
            let attn = AttentionVars {
                heads: l.attn.heads,
                w_q: next(),
                b_q: next(),
                w_k: next(),
                b_k: next(),
                w_v: next(),
                b_v: next(),
                w_o: next(),
                b_o: next(),
            };
            let ln2 = (next(), next());
            let mlp = [next(), next(), next(), next()];
            let mixer = l.mixer.as_ref().map(|_| next());
            layers.push(LayerVars {
                ln1,
                attn,
                ln2,
                mlp,
                mixer,
            });
        }
        let coupling = self.coupling.as_ref().map(|_| (next(), next()));
        let gamma_raw = self.gamma_raw.as_ref().map(|_| next());
        let final_ln = (next(), next());
        let head = (next(), next());
        ModelVars {
            all,
            embed: (embed_w, embed_b),
            cls,
            pos,
            layers,
            coupling,
            gamma_raw,
            final_ln,
            head,
        }
    }
}

/// Tape handles for [`LayerParams`]. Mixer leaves hold the `[heads * P, P]`
/// stacked form.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub ln1: (Var, Var),
    pub attn: AttentionVars,
    pub ln2: (Var, Var),
    /// `w1, b1, w2, b2`.
    pub mlp: [Var; 4],
    pub mixer: Option<Var>,
}

/// Tape handles for [`ModelParams`]; `all` follows [`ModelParams::named`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub all: Vec<Var>,
    pub embed: (Var, Var),
    pub cls: Var,
    pub pos: Var,
    pub layers: Vec<LayerVars>,
    pub coupling: Option<(Var, Var)>,
    pub gamma_raw: Option<Var>,
    pub final_ln: (Var, Var),
    pub head: (Var, Var),
}
