//! Phase states and their discrete Kuramoto evolution.
//!
//! Phases are stored as explicit `(cos, sin)` pairs. A state holds, for every
//! token (CLS at index 0) and every head, `pairs` unit vectors on the circle.
//! The update is
//!
//! ```text
//! r_i <- normalize(r_i + gamma * proj_{r_i}(sum_j J_ij r_j))
//! ```
//!
//! applied independently per head and per pair, with no natural-frequency
//! term (all oscillators share one frequency).

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, KopeError, Result};
use crate::par::Exec;
use crate::tensor::{self, Tensor};

/// Tolerance on `|r| = 1` for states returned by public operations.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseState {
    tokens: usize,
    heads: usize,
    pairs: usize,
    data: Vec<f64>,
}

impl PhaseState {
    /// Layout `[tokens, heads, pairs, 2]`; every pair must be unit-norm.
    pub fn new(tokens: usize, heads: usize, pairs: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != tokens * heads * pairs * 2 {
            return dim_err(
                "PhaseState::new",
                format!("{} values for [{tokens}, {heads}, {pairs}, 2]", data.len()),
            );
        }
        let s = Self {
            tokens,
            heads,
            pairs,
            data,
        };
        let err = s.max_norm_error();
        if !(err <= UNIT_NORM_TOL) {
            return Err(KopeError::Parameter(format!(
                "phase pairs must be unit-norm (max deviation {err:e})"
            )));
        }
        Ok(s)
    }

    /// Builds a state from angles laid out `[tokens, heads, pairs]`.
    pub fn from_angles(tokens: usize, heads: usize, pairs: usize, angles: &[f64]) -> Result<Self> {
        if angles.len() != tokens * heads * pairs {
            return dim_err("PhaseState::from_angles", "angle count mismatch");
        }
        let data = angles.iter().flat_map(|a| [a.cos(), a.sin()]).collect();
        Self::new(tokens, heads, pairs, data)
    }

    /// Every pair at the same angle.
    pub fn synchronized(tokens: usize, heads: usize, pairs: usize, angle: f64) -> Self {
        let n = tokens * heads * pairs;
        Self {
            tokens,
            heads,
            pairs,
            data: std::iter::repeat_n([angle.cos(), angle.sin()], n).flatten().collect(),
        }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn offset(&self, token: usize, head: usize, pair: usize) -> usize {
        ((token * self.heads + head) * self.pairs + pair) * 2
    }

    pub fn pair(&self, token: usize, head: usize, pair: usize) -> (f64, f64) {
        let o = self.offset(token, head, pair);
        (self.data[o], self.data[o + 1])
    }

    /// Angle in `(-pi, pi]`, recovered by `atan2`.
    pub fn angle(&self, token: usize, head: usize, pair: usize) -> f64 {
        let (c, s) = self.pair(token, head, pair);
        s.atan2(c)
    }

    /// Angles of every token for one head and subspace.
    pub fn angles_of(&self, head: usize, pair: usize) -> Vec<f64> {
        (0..self.tokens).map(|t| self.angle(t, head, pair)).collect()
    }

    pub fn max_norm_error(&self) -> f64 {
        self.data
            .chunks_exact(2)
            .map(|p| (p[0].hypot(p[1]) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// The `[tokens, 2 * pairs]` slice belonging to one head.
    pub fn head_matrix(&self, head: usize) -> Tensor {
        let w = 2 * self.pairs;
        let mut out = Vec::with_capacity(self.tokens * w);
        for t in 0..self.tokens {
            let o = self.offset(t, head, 0);
            out.extend_from_slice(&self.data[o..o + w]);
        }
        Tensor::new(vec![self.tokens, w], out).expect("head slice shape")
    }

    /// Inverse of [`head_matrix`](Self::head_matrix) over all heads.
    pub fn from_head_matrices(heads: &[Tensor]) -> Result<Self> {
        let Some(first) = heads.first() else {
            return dim_err("PhaseState::from_head_matrices", "no heads");
        };
        let (tokens, w) = first.dims2()?;
        if w % 2 != 0 || heads.iter().any(|h| h.shape() != first.shape()) {
            return dim_err("PhaseState::from_head_matrices", "inconsistent head shapes");
        }
        let mut data = Vec::with_capacity(tokens * heads.len() * w);
        for t in 0..tokens {
            for h in heads {
                data.extend_from_slice(h.row(t));
            }
        }
        Self::new(tokens, heads.len(), w / 2, data)
    }

    /// Adds `c` to every angle.
    pub fn shifted(&self, c: f64) -> Self {
        let (cc, sc) = (c.cos(), c.sin());
        let data = self
            .data
            .chunks_exact(2)
            .flat_map(|p| [cc * p[0] - sc * p[1], sc * p[0] + cc * p[1]])
            .collect();
        Self { data, ..*self }
    }
}

/// Which axis of the coupling logits the softmax normalizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingAxis {
    /// Each receiver's row over senders sums to one.
    #[default]
    Senders,
    /// Each sender's column over receivers sums to one.
    Receivers,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingMatrix {
    heads: usize,
    tokens: usize,
    axis: CouplingAxis,
    weights: Vec<f64>,
}

impl CouplingMatrix {
    /// `weights` laid out `[heads, tokens, tokens]`, receiver-major.
    pub fn new(heads: usize, tokens: usize, axis: CouplingAxis, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != heads * tokens * tokens {
            return dim_err("CouplingMatrix::new", "weight count mismatch");
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(KopeError::Parameter("coupling weights must be nonnegative".into()));
        }
        let m = Self {
            heads,
            tokens,
            axis,
            weights,
        };
        for h in 0..heads {
            for i in 0..tokens {
                let s: f64 = (0..tokens)
                    .map(|j| match axis {
                        CouplingAxis::Senders => m.get(h, i, j),
                        CouplingAxis::Receivers => m.get(h, j, i),
                    })
                    .sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(KopeError::Parameter(format!(
                        "coupling head {h} line {i} sums to {s}, expected 1"
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn uniform(heads: usize, tokens: usize) -> Self {
        Self {
            heads,
            tokens,
            axis: CouplingAxis::Senders,
            weights: vec![1.0 / tokens as f64; heads * tokens * tokens],
        }
    }

    pub fn from_head_matrices(mats: &[Tensor], axis: CouplingAxis) -> Result<Self> {
        let tokens = mats.first().map_or(0, |m| m.rows());
        let mut w = Vec::with_capacity(mats.len() * tokens * tokens);
        for m in mats {
            if m.shape() != [tokens, tokens] {
                return dim_err("CouplingMatrix::from_head_matrices", "non-square head");
            }
            w.extend_from_slice(m.data());
        }
        Self::new(mats.len(), tokens, axis, w)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn axis(&self) -> CouplingAxis {
        self.axis
    }

    pub fn get(&self, head: usize, receiver: usize, sender: usize) -> f64 {
        self.weights[(head * self.tokens + receiver) * self.tokens + sender]
    }

    pub fn head_matrix(&self, head: usize) -> Tensor {
        let n = self.tokens * self.tokens;
        Tensor::new(
            vec![self.tokens, self.tokens],
            self.weights[head * n..(head + 1) * n].to_vec(),
        )
        .expect("head shape")
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.heads).all(|h| {
            (0..self.tokens).all(|i| (0..self.tokens).all(|j| (self.get(h, i, j) - self.get(h, j, i)).abs() <= tol))
        })
    }
}

/// Natural-frequency handling. Only the omitted form is supported: with
/// equal frequencies the rotation term drops out of relative phases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaMode {
    #[default]
    Omitted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KuramotoConfig {
    pub gamma: f64,
    #[serde(default)]
    pub gamma_learnable: bool,
    #[serde(default)]
    pub omega_mode: OmegaMode,
}

impl Default for KuramotoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.05,
            gamma_learnable: false,
            omega_mode: OmegaMode::Omitted,
        }
    }
}

impl KuramotoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(KopeError::Configuration(format!(
                "gamma must be finite and >= 0, got {}",
                self.gamma
            )));
        }
        if self.gamma_learnable && self.gamma == 0.0 {
            return Err(KopeError::Configuration(
                "a learnable gamma is parameterized through softplus and must start > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Pairwise normalization of a raw `[tokens, heads, pairs, 2]` buffer.
pub fn normalize_pairs(tokens: usize, heads: usize, pairs: usize, raw: &[f64]) -> Result<PhaseState> {
    let t = Tensor::new(vec![tokens * heads, 2 * pairs], raw.to_vec())?;
    let n = tensor::normalize_pairs(&t)?;
    PhaseState::new(tokens, heads, pairs, n.into_data())
}

/// Per pair: `drive - <drive, r> r`. `drive` shares the state's layout.
pub fn project_orthogonal(state: &PhaseState, drive: &[f64]) -> Result<Vec<f64>> {
    let s = Tensor::new(vec![state.tokens * state.heads, 2 * state.pairs], state.data.clone())?;
    let d = Tensor::new(s.shape().to_vec(), drive.to_vec())?;
    Ok(tensor::project_pairs(&s, &d)?.into_data())
}

/// The coupling-aggregated drive `(J r)_i = sum_j J_ij r_j`, per head.
pub fn coupling_drive(state: &PhaseState, coupling: &CouplingMatrix) -> Result<Vec<Tensor>> {
    if coupling.tokens != state.tokens || coupling.heads != state.heads {
        return dim_err(
            "coupling_drive",
            format!(
                "coupling [{}, {}] vs state tokens {} heads {}",
                coupling.heads, coupling.tokens, state.tokens, state.heads
            ),
        );
    }
    (0..state.heads)
        .map(|h| coupling.head_matrix(h).matmul(&state.head_matrix(h)))
        .collect()
}

/// One discrete Kuramoto step.
pub fn kuramoto_step(state: &PhaseState, coupling: &CouplingMatrix, config: &KuramotoConfig) -> Result<PhaseState> {
    config.validate()?;
    let drives = coupling_drive(state, coupling)?;
    if config.gamma == 0.0 {
        return Ok(state.clone());
    }
    let heads = drives
        .iter()
        .enumerate()
        .map(|(h, drive)| {
            let r = state.head_matrix(h);
            let proj = tensor::project_pairs(&r, drive)?;
            tensor::normalize_pairs(&r.add(&proj.scale(config.gamma))?)
        })
        .collect::<Result<Vec<_>>>()?;
    PhaseState::from_head_matrices(&heads)
}

/// `steps` successive updates under a fixed coupling.
pub fn evolve(state: &PhaseState, coupling: &CouplingMatrix, config: &KuramotoConfig, steps: usize) -> Result<PhaseState> {
    let mut s = state.clone();
    for _ in 0..steps {
        s = kuramoto_step(&s, coupling, config)?;
    }
    Ok(s)
}

/// Steps independent sequences, in parallel when the policy allows.
pub fn step_batch(
    states: &[PhaseState],
    couplings: &[CouplingMatrix],
    config: &KuramotoConfig,
    exec: Exec,
) -> Result<Vec<PhaseState>> {
    if states.len() != couplings.len() {
        return dim_err("step_batch", "one coupling per state required");
    }
    exec.try_map(states.len(), |i| kuramoto_step(&states[i], &couplings[i], config))
}

/// `sum_h sum_p sum_ij J_ij (1 - cos(phi_i - phi_j))`.
pub fn energy(state: &PhaseState, coupling: &CouplingMatrix) -> Result<f64> {
    if coupling.tokens != state.tokens || coupling.heads != state.heads {
        return dim_err("energy", "coupling and state disagree");
    }
    let mut total = 0.0;
    for h in 0..state.heads {
        for p in 0..state.pairs {
            for i in 0..state.tokens {
                let (ci, si) = state.pair(i, h, p);
                for j in 0..state.tokens {
                    let (cj, sj) = state.pair(j, h, p);
                    total += coupling.get(h, i, j) * (1.0 - (ci * cj + si * sj));
                }
            }
        }
    }
    Ok(total)
}

fn check_distribution(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(KopeError::Parameter(format!(
            "{} weights for {n} tokens",
            weights.len()
        )));
    }
    let s: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || (s - 1.0).abs() > 1e-9 {
        return Err(KopeError::Parameter(format!(
            "weights must be a distribution (sum {s})"
        )));
    }
    Ok(())
}

/// `|sum_j w_j e^{i phi_j}|` averaged over heads and pairs; uniform weights
/// when `weights` is `None`.
pub fn order_parameter(state: &PhaseState, weights: Option<&[f64]>) -> Result<f64> {
    let n = state.tokens;
    let uniform;
    let w = match weights {
        Some(w) => {
            check_distribution(w, n)?;
            w
        }
        None => {
            uniform = vec![1.0 / n as f64; n];
            &uniform
        }
    };
    let mut acc = 0.0;
    for h in 0..state.heads {
        for p in 0..state.pairs {
            let (mut c, mut s) = (0.0, 0.0);
            for (t, wt) in w.iter().enumerate() {
                let (ct, st) = state.pair(t, h, p);
                c += wt * ct;
                s += wt * st;
            }
            acc += c.hypot(s);
        }
    }
    Ok(acc / (state.heads * state.pairs) as f64)
}
