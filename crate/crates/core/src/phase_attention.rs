//! Rotary phase injection into multi-head self-attention.
//!
//! Each head of width `d_h` is split into `d_h / 2` coordinate pairs
//! `(2j, 2j + 1)`, and pair `j` is rotated by the head's phase subspace `j`.
//! Queries and keys are rotated by their own token's phase, so attention
//! logits depend on phase differences. Values are rotated by the sender's
//! phase and the aggregated result is rotated back by the receiver's phase
//! before the output projection.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, KopeError, Result};
use crate::kuramoto::{CouplingAxis, CouplingMatrix, PhaseState};
use crate::rng::KopeRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Layout tag for the pair convention, recorded in checkpoints.
pub const PAIR_LAYOUT: &str = "interleaved-pairs-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct RotaryAttentionParams {
    pub heads: usize,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

impl RotaryAttentionParams {
    /// Gaussian weights with standard deviation `1/sqrt(d)`, zero biases.
    pub fn init(width: usize, heads: usize, rng: &mut KopeRng) -> Result<Self> {
        check_heads(width, heads)?;
        let std = 1.0 / (width as f64).sqrt();
        let mut w = || Tensor::new(vec![width, width], rng.normal_vec(width * width, std));
        Ok(Self {
            heads,
            w_q: w()?,
            w_k: w()?,
            w_v: w()?,
            w_o: w()?,
            b_q: Tensor::zeros(&[width]),
            b_k: Tensor::zeros(&[width]),
            b_v: Tensor::zeros(&[width]),
            b_o: Tensor::zeros(&[width]),
        })
    }

    pub fn width(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        check_heads(d, self.heads)?;
        for w in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            if w.shape() != [d, d] {
                return dim_err("RotaryAttentionParams", format!("weight shape {:?}", w.shape()));
            }
        }
        for b in [&self.b_q, &self.b_k, &self.b_v, &self.b_o] {
            if b.len() != d {
                return dim_err("RotaryAttentionParams", "bias length");
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.w_q, &self.b_q, &self.w_k, &self.b_k, &self.w_v, &self.b_v, &self.w_o, &self.b_o,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        let [w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o] = self.tensors().map(|t| tape.leaf(t.clone()));
        AttentionVars {
            heads: self.heads,
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            w_o,
            b_o,
        }
    }
}

fn check_heads(width: usize, heads: usize) -> Result<()> {
    if heads == 0 || width % heads != 0 {
        return Err(KopeError::Configuration(format!(
            "width {width} is not divisible by {heads} heads"
        )));
    }
    if (width / heads) % 2 != 0 {
        return Err(KopeError::Configuration(format!(
            "head dim {} must be even for pairwise rotation",
            width / heads
        )));
    }
    Ok(())
}

/// Tape handles for one layer's attention weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub heads: usize,
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

/// Bias-free shared projections producing coupling queries and keys.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingParams {
    pub h_q: Tensor,
    pub h_k: Tensor,
}

impl CouplingParams {
    pub fn init(width: usize, rng: &mut KopeRng) -> Result<Self> {
        let std = 1.0 / (width as f64).sqrt();
        Ok(Self {
            h_q: Tensor::new(vec![width, width], rng.normal_vec(width * width, std))?,
            h_k: Tensor::new(vec![width, width], rng.normal_vec(width * width, std))?,
        })
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            h_q: Tensor::zeros(&[width, width]),
            h_k: Tensor::zeros(&[width, width]),
        }
    }
}

/// Per-head mixing of phase subspaces, shape `[heads, P, P]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseMixer {
    pub mix: Tensor,
}

impl PhaseMixer {
    pub fn identity(heads: usize, pairs: usize) -> Self {
        let mut mix = Tensor::zeros(&[heads, pairs, pairs]);
        for h in 0..heads {
            for i in 0..pairs {
                mix.data_mut()[(h * pairs + i) * pairs + i] = 1.0;
            }
        }
        Self { mix }
    }

    /// Identity plus elementwise noise uniform in `[-scale, scale]`.
    pub fn near_identity(heads: usize, pairs: usize, scale: f64, rng: &mut KopeRng) -> Self {
        let mut m = Self::identity(heads, pairs);
        for v in m.mix.data_mut() {
            *v += rng.uniform_range(-scale, scale);
        }
        m
    }

    pub fn heads(&self) -> usize {
        self.mix.shape()[0]
    }

    pub fn pairs(&self) -> usize {
        self.mix.shape()[1]
    }

    /// `[heads * P, P]` view used on the tape.
    pub fn stacked(&self) -> Tensor {
        let (h, p) = (self.heads(), self.pairs());
        self.mix.reshape(vec![h * p, p]).expect("mixer shape")
    }

    /// Mixed, re-normalized phases for every head.
    pub fn apply(&self, state: &PhaseState) -> Result<PhaseState> {
        let mut tape = Tape::new();
        let m = tape.leaf(self.stacked());
        let heads = (0..state.heads())
            .map(|h| {
                let r = tape.leaf(state.head_matrix(h));
                let out = mix_head(&mut tape, m, r, h, self.pairs())?;
                Ok(tape.value(out).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        PhaseState::from_head_matrices(&heads)
    }
}

/// Normalized `M_h r_h` for one head on the tape.
pub fn mix_head(tape: &mut Tape, stacked_mixer: Var, phases: Var, head: usize, pairs: usize) -> Result<Var> {
    let m = tape.slice_rows(stacked_mixer, head * pairs, pairs)?;
    let mixed = tape.mix_pairs(m, phases)?;
    tape.normalize_pairs(mixed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseInitConfig {
    pub base: f64,
    /// `(height, width)` in patch units.
    pub grid: (usize, usize),
}

impl Default for PhaseInitConfig {
    fn default() -> Self {
        Self {
            base: 10000.0,
            grid: (8, 8),
        }
    }
}

/// Multi-frequency 2D positional phases. Token 0 is CLS at angle 0; token
/// `1 + y * width + x` sits at grid position `(x, y)`. Subspace `j < d_h/4`
/// carries `x * psi_j` and subspace `j >= d_h/4` carries
/// `y * psi_{j - d_h/4}`, with `psi_j = base^(-j / (d_h/4))`.
pub fn init_phases(config: &PhaseInitConfig, heads: usize, head_dim: usize) -> Result<PhaseState> {
    let (gh, gw) = config.grid;
    if gh == 0 || gw == 0 {
        return Err(KopeError::Configuration("phase grid must be at least 1x1".into()));
    }
    if !(config.base > 1.0) {
        return Err(KopeError::Configuration(format!(
            "frequency base must exceed 1, got {}",
            config.base
        )));
    }
    if head_dim % 4 != 0 {
        return Err(KopeError::Configuration(format!(
            "head dim {head_dim} must be divisible by 4 for the x/y frequency split"
        )));
    }
    let quarter = head_dim / 4;
    let pairs = head_dim / 2;
    let freq: Vec<f64> = (0..quarter)
        .map(|j| config.base.powf(-(j as f64) / quarter as f64))
        .collect();
    let tokens = 1 + gh * gw;
    let mut angles = vec![0.0; tokens * heads * pairs];
    for y in 0..gh {
        for x in 0..gw {
            let t = 1 + y * gw + x;
            for h in 0..heads {
                for j in 0..pairs {
                    let a = if j < quarter {
                        x as f64 * freq[j]
                    } else {
                        y as f64 * freq[j - quarter]
                    };
                    angles[(t * heads + h) * pairs + j] = a;
                }
            }
        }
    }
    PhaseState::from_angles(tokens, heads, pairs, &angles)
}

/// Rotates pair `j` of `v` by `sign * phi_j`, where `phases` holds the
/// `(cos, sin)` of each `phi_j`.
pub fn rotate_halfdim(v: &[f64], phases: &[f64], sign: f64) -> Result<Vec<f64>> {
    if v.len() != phases.len() || v.len() % 2 != 0 {
        return dim_err("rotate_halfdim", format!("{} values vs {} phase entries", v.len(), phases.len()));
    }
    let t = Tensor::new(vec![1, v.len()], v.to_vec())?;
    let p = Tensor::new(vec![1, v.len()], phases.to_vec())?;
    Ok(crate::tensor::rotate_pairs(&t, &p, sign)?.into_data())
}

/// Which attention paths receive phase rotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RotationPaths {
    pub qk: bool,
    pub vo: bool,
}

impl RotationPaths {
    pub const ALL: RotationPaths = RotationPaths { qk: true, vo: true };
    pub const QK_ONLY: RotationPaths = RotationPaths { qk: true, vo: false };
    pub const NONE: RotationPaths = RotationPaths { qk: false, vo: false };
}

/// Tape outputs of one attention block.
pub struct RmhsaVars {
    pub output: Var,
    /// Raw `q_m . k_n` scores per head, before scaling.
    pub scores: Vec<Var>,
    /// Row-stochastic attention per head.
    pub attention: Vec<Var>,
}

/// Multi-head self-attention with phase rotation, recorded on a tape.
/// `phases` holds one `[tokens, d_h]` pair matrix per head, already mixed
/// when a mixer is in use.
pub fn rmhsa_tape(
    tape: &mut Tape,
    x: Var,
    phases: Option<&[Var]>,
    attn: &AttentionVars,
    paths: RotationPaths,
) -> Result<RmhsaVars> {
    let d = tape.value(x).cols();
    let dh = d / attn.heads;
    let q = tape.linear(x, attn.w_q, Some(attn.b_q))?;
    let k = tape.linear(x, attn.w_k, Some(attn.b_k))?;
    let v = tape.linear(x, attn.w_v, Some(attn.b_v))?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(attn.heads);
    let mut scores = Vec::with_capacity(attn.heads);
    let mut attention = Vec::with_capacity(attn.heads);
    for h in 0..attn.heads {
        let mut qh = tape.slice_cols(q, h * dh, dh)?;
        let mut kh = tape.slice_cols(k, h * dh, dh)?;
        let mut vh = tape.slice_cols(v, h * dh, dh)?;
        let rot = phases.map(|p| p[h]);
        if let (Some(r), true) = (rot, paths.qk) {
            qh = tape.rotate(qh, r, 1.0)?;
            kh = tape.rotate(kh, r, 1.0)?;
        }
        if let (Some(r), true) = (rot, paths.vo) {
            vh = tape.rotate(vh, r, 1.0)?;
        }
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let logits = tape.scale(s, scale);
        let a = tape.softmax_rows(logits, 1.0)?;
        let mut oh = tape.matmul(a, vh)?;
        if let (Some(r), true) = (rot, paths.vo) {
            oh = tape.rotate(oh, r, -1.0)?;
        }
        scores.push(s);
        attention.push(a);
        outs.push(oh);
    }
    let cat = tape.concat_cols(&outs)?;
    let output = tape.linear(cat, attn.w_o, Some(attn.b_o))?;
    Ok(RmhsaVars {
        output,
        scores,
        attention,
    })
}

pub struct RmhsaOutput {
    pub output: Tensor,
    pub scores: Vec<Tensor>,
    pub attention: Vec<Tensor>,
}

/// Standalone attention forward. `tokens` is `[L, d]` (already normalized
/// upstream); phases are mixed through `mixer` when given.
pub fn rmhsa(
    tokens: &Tensor,
    phases: &PhaseState,
    params: &RotaryAttentionParams,
    mixer: Option<&PhaseMixer>,
    paths: RotationPaths,
) -> Result<RmhsaOutput> {
    params.validate()?;
    let (l, d) = tokens.dims2()?;
    if d != params.width() || phases.tokens() != l || phases.heads() != params.heads {
        return dim_err("rmhsa", "tokens, phases and params disagree");
    }
    if 2 * phases.pairs() != params.head_dim() {
        return dim_err("rmhsa", "phase pairs must cover the head dimension");
    }
    let mut tape = Tape::new();
    let x = tape.leaf(tokens.clone());
    let vars = params.bind(&mut tape);
    let mixer_var = mixer.map(|m| tape.leaf(m.stacked()));
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let r = tape.leaf(phases.head_matrix(h));
        heads.push(match mixer_var {
            Some(m) => mix_head(&mut tape, m, r, h, phases.pairs())?,
            None => r,
        });
    }
    let out = rmhsa_tape(&mut tape, x, Some(&heads), &vars, paths)?;
    Ok(RmhsaOutput {
        output: tape.value(out.output).clone(),
        scores: out.scores.iter().map(|v| tape.value(*v).clone()).collect(),
        attention: out.attention.iter().map(|v| tape.value(*v).clone()).collect(),
    })
}

/// Denominator of the coupling logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingScale {
    /// `sqrt(d_h)`, matching per-head attention.
    #[default]
    HeadDim,
    /// `sqrt(d)` over the full model width.
    ModelDim,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingOptions {
    #[serde(default)]
    pub axis: CouplingAxis,
    #[serde(default)]
    pub scale: CouplingScale,
}

/// Per-head coupling matrices recorded on a tape.
pub fn coupling_tape(
    tape: &mut Tape,
    z: Var,
    h_q: Var,
    h_k: Var,
    heads: usize,
    options: CouplingOptions,
) -> Result<Vec<Var>> {
    let d = tape.value(z).cols();
    let dh = d / heads;
    let denom = match options.scale {
        CouplingScale::HeadDim => dh as f64,
        CouplingScale::ModelDim => d as f64,
    }
    .sqrt();
    let cq = tape.matmul(z, h_q)?;
    let ck = tape.matmul(z, h_k)?;
    (0..heads)
        .map(|h| {
            let qh = tape.slice_cols(cq, h * dh, dh)?;
            let kh = tape.slice_cols(ck, h * dh, dh)?;
            match options.axis {
                CouplingAxis::Senders => {
                    let kt = tape.transpose(kh)?;
                    let s = tape.matmul(qh, kt)?;
                    let s = tape.scale(s, 1.0 / denom);
                    tape.softmax_rows(s, 1.0)
                }
                CouplingAxis::Receivers => {
                    // Softmax over receivers: normalize the transposed logits row-wise.
                    let qt = tape.transpose(qh)?;
                    let st = tape.matmul(kh, qt)?;
                    let st = tape.scale(st, 1.0 / denom);
                    let jt = tape.softmax_rows(st, 1.0)?;
                    tape.transpose(jt)
                }
            }
        })
        .collect()
}

/// Data-adaptive coupling `J_h = softmax(h_q(z)_h h_k(z)_h^T / sqrt(d_h))`.
pub fn compute_coupling(
    tokens: &Tensor,
    params: &CouplingParams,
    heads: usize,
    options: CouplingOptions,
) -> Result<CouplingMatrix> {
    let (_, d) = tokens.dims2()?;
    check_heads(d, heads)?;
    if params.h_q.shape() != [d, d] || params.h_k.shape() != [d, d] {
        return dim_err("compute_coupling", "h_q/h_k must be [d, d]");
    }
    let mut tape = Tape::new();
    let z = tape.leaf(tokens.clone());
    let hq = tape.leaf(params.h_q.clone());
    let hk = tape.leaf(params.h_k.clone());
    let mats = coupling_tape(&mut tape, z, hq, hk, heads, options)?;
    let vals: Vec<Tensor> = mats.iter().map(|v| tape.value(*v).clone()).collect();
    CouplingMatrix::from_head_matrices(&vals, options.axis)
}
