use serde::{Deserialize, Serialize};

use crate::error::{KopeError, Result};
use crate::rng::KopeRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::{PhaseGain, TheoryInstance};

const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShallowConfig {
    /// MLP hidden width `m`.
    pub hidden: usize,
    /// Value width; `2M` when absent.
    #[serde(default)]
    pub value_dim: Option<usize>,
    /// Query/key width; `2M` when absent.
    #[serde(default)]
    pub qk_dim: Option<usize>,
    /// Initialization error of the query, key and value maps.
    pub sigma: f64,
    /// Standard deviation of the MLP hidden weights; `1/sqrt(m)` when absent.
    #[serde(default)]
    pub w_o_std: Option<f64>,
    #[serde(default)]
    pub gain: PhaseGain,
}

impl Default for ShallowConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            value_dim: None,
            qk_dim: None,
            sigma: 0.01,
            w_o_std: None,
            gain: PhaseGain::default(),
        }
    }
}

/// Single-head attention followed by a two-layer ReLU MLP. `a` holds one
/// output vector per token (row `l` is `a_(l)`) and is never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct ShallowModelParams {
    pub a: Tensor,
    pub w_o: Tensor,
    pub w_v: Tensor,
    pub w_k: Tensor,
    pub w_q: Tensor,
    pub gain: PhaseGain,
}

impl ShallowModelParams {
    /// Query, key and value maps start at `sum_j e_j mu_j^T` plus Gaussian
    /// error `sigma`; `W_O` is Gaussian; `A` is random `+-1/sqrt(m)`.
    pub fn init(config: &ShallowConfig, patterns: &[Vec<f64>], tokens: usize, seed: u64) -> Result<Self> {
        let m_count = patterns.len();
        let d = patterns.first().map_or(0, Vec::len);
        let m = config.hidden;
        let ma = config.value_dim.unwrap_or(2 * m_count);
        let mb = config.qk_dim.unwrap_or(2 * m_count);
        if m == 0 || d == 0 || ma < m_count || mb < m_count {
            return Err(KopeError::Configuration(format!(
                "hidden {m}, value {ma} and query/key {mb} widths must hold {m_count} patterns"
            )));
        }
        let mut rng = KopeRng::new(seed);
        let embed = |rows: usize, rng: &mut KopeRng| {
            let mut w = Tensor::new(vec![rows, d], rng.normal_vec(rows * d, config.sigma)).expect("shape");
            for (j, p) in patterns.iter().enumerate() {
                for (c, v) in p.iter().enumerate() {
                    w.data_mut()[j * d + c] += v;
                }
            }
            w
        };
        let w_q = embed(mb, &mut rng);
        let w_k = embed(mb, &mut rng);
        let w_v = embed(ma, &mut rng);
        let std = config.w_o_std.unwrap_or(1.0 / (m as f64).sqrt());
        let w_o = Tensor::new(vec![m, ma], rng.normal_vec(m * ma, std))?;
        let s = 1.0 / (m as f64).sqrt();
        let a_data = (0..(tokens + 1) * m).map(|_| if rng.coin() { s } else { -s }).collect();
        Ok(Self {
            a: Tensor::new(vec![tokens + 1, m], a_data)?,
            w_o,
            w_v,
            w_k,
            w_q,
            gain: config.gain,
        })
    }

    /// Trainable tensors `(W_O, W_V, W_K, W_Q)`.
    pub fn trainable(&self) -> [&Tensor; 4] {
        [&self.w_o, &self.w_v, &self.w_k, &self.w_q]
    }

    fn trainable_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w_o, &mut self.w_v, &mut self.w_k, &mut self.w_q]
    }

    fn check(&self, inst: &TheoryInstance) -> Result<()> {
        let d = self.w_q.cols();
        if inst.tokens.iter().any(|t| t.len() != d) || self.a.rows() != inst.tokens.len() {
            return Err(KopeError::Dimension {
                op: "shallow_forward",
                detail: format!(
                    "instance has {} tokens of width {:?}, model expects {} of width {d}",
                    inst.tokens.len(),
                    inst.tokens.first().map(Vec::len),
                    self.a.rows()
                ),
            });
        }
        Ok(())
    }
}

/// Per-sample readings of the shallow model.
#[derive(Clone, Debug, PartialEq)]
pub struct ShallowEval {
    pub output: f64,
    /// CLS attention over tokens `1..=L`.
    pub cls_attention: Vec<f64>,
    /// Content-only gap: `min_{S*} <q_0, k_j> - max_{not S*} <q_0, k_r>`.
    pub delta: f64,
    /// Gap of the phase-shifted logits between in-cluster relevant tokens
    /// and the rest.
    pub delta_a: f64,
    /// CLS attention mass on `S*`.
    pub concentration: f64,
}

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn gap(hi: &[usize], lo: &[usize], score: impl Fn(usize) -> f64) -> f64 {
    let min_hi = hi.iter().map(|&j| score(j)).fold(f64::INFINITY, f64::min);
    let max_lo = lo.iter().map(|&j| score(j)).fold(f64::NEG_INFINITY, f64::max);
    min_hi - max_lo
}

/// Output, CLS attention and logit gaps for one instance. Every token is a
/// query; keys are tokens `1..=L`.
pub fn shallow_evaluate(params: &ShallowModelParams, inst: &TheoryInstance, use_phase: bool) -> Result<ShallowEval> {
    params.check(inst)?;
    let n = inst.tokens.len();
    let q: Vec<Vec<f64>> = inst.tokens.iter().map(|x| matvec(&params.w_q, x)).collect();
    let k: Vec<Vec<f64>> = inst.tokens.iter().map(|x| matvec(&params.w_k, x)).collect();
    let v: Vec<Vec<f64>> = inst.tokens.iter().map(|x| matvec(&params.w_v, x)).collect();
    let phase = |i: usize, j: usize| params.gain.apply((inst.phases[i] - inst.phases[j]).cos());
    let mut output = 0.0;
    let mut cls_attention = Vec::new();
    for l in 0..n {
        let s: Vec<f64> = (1..n)
            .map(|j| dot(&q[l], &k[j]) + if use_phase { phase(l, j) } else { 0.0 })
            .collect();
        let att = softmax(&s);
        let mut u = vec![0.0; params.w_v.rows()];
        for (j, a) in att.iter().enumerate() {
            for (ui, vi) in u.iter_mut().zip(&v[j + 1]) {
                *ui += a * vi;
            }
        }
        let h = matvec(&params.w_o, &u);
        output += h.iter().zip(params.a.row(l)).map(|(h, a)| h.max(0.0) * a).sum::<f64>();
        if l == 0 {
            cls_attention = att;
        }
    }
    output /= n as f64;
    let others = inst.s_other();
    let content = |j: usize| dot(&q[0], &k[j]);
    let delta = gap(&inst.s_star, &others, content);
    let delta_a = gap(&inst.s_star_hat(), &others, |j| content(j) + phase(0, j));
    let concentration = inst.s_star.iter().map(|&j| cls_attention[j - 1]).sum();
    Ok(ShallowEval {
        output,
        cls_attention,
        delta,
        delta_a,
        concentration,
    })
}

/// `F(X)` for one instance.
pub fn shallow_forward(params: &ShallowModelParams, inst: &TheoryInstance, use_phase: bool) -> Result<f64> {
    shallow_evaluate(params, inst, use_phase).map(|e| e.output)
}

/// Hinge loss `max(0, 1 - y F(X))` on a tape, with `vars` the leaves for
/// `(W_O, W_V, W_K, W_Q)`.
pub fn hinge_loss_tape(
    tape: &mut Tape,
    vars: [Var; 4],
    params: &ShallowModelParams,
    inst: &TheoryInstance,
    use_phase: bool,
) -> Result<Var> {
    params.check(inst)?;
    let [w_o, w_v, w_k, w_q] = vars;
    let n = inst.tokens.len();
    let x_all = inst.token_matrix();
    let x_keys = x_all.slice_rows(1, n - 1)?;
    let xa = tape.leaf(x_all);
    let xk = tape.leaf(x_keys);
    let wq_t = tape.transpose(w_q)?;
    let q = tape.matmul(xa, wq_t)?;
    let wk_t = tape.transpose(w_k)?;
    let k = tape.matmul(xk, wk_t)?;
    let k_t = tape.transpose(k)?;
    let mut s = tape.matmul(q, k_t)?;
    if use_phase {
        let bias: Vec<f64> = (0..n)
            .flat_map(|i| (1..n).map(move |j| (i, j)))
            .map(|(i, j)| params.gain.apply((inst.phases[i] - inst.phases[j]).cos()))
            .collect();
        let b = tape.leaf(Tensor::new(vec![n, n - 1], bias)?);
        s = tape.add(s, b)?;
    }
    let att = tape.softmax_rows(s, 1.0)?;
    let wv_t = tape.transpose(w_v)?;
    let v = tape.matmul(xk, wv_t)?;
    let u = tape.matmul(att, v)?;
    let wo_t = tape.transpose(w_o)?;
    let h = tape.matmul(u, wo_t)?;
    let h = tape.relu(h);
    let a = tape.leaf(params.a.clone());
    let weighted = tape.mul(h, a)?;
    let total = tape.sum(weighted);
    let y = f64::from(inst.label);
    let margin = tape.scale(total, -y / n as f64);
    let margin = tape.add_scalar(margin, 1.0);
    Ok(tape.relu(margin))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub use_phase: bool,
    /// Seed of the batch order.
    pub seed: u64,
    pub trace_every: usize,
    /// Number of leading instances evaluated for the trace.
    pub probe: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lr: 0.1,
            batch: 16,
            steps: 2000,
            use_phase: false,
            seed: 0,
            trace_every: 1,
            probe: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    /// Mean hinge loss over the probe instances.
    pub loss: f64,
    /// Fraction of probe instances with `sign(F) = y`.
    pub accuracy: f64,
    /// CLS attention of the first probe instance.
    pub cls_attention: Vec<f64>,
    pub delta: f64,
    pub delta_a: f64,
    pub concentration: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

fn trace_row(params: &ShallowModelParams, probe: &[TheoryInstance], use_phase: bool, step: usize) -> Result<TraceRow> {
    let mut row = TraceRow {
        step,
        loss: 0.0,
        accuracy: 0.0,
        cls_attention: Vec::new(),
        delta: 0.0,
        delta_a: 0.0,
        concentration: 0.0,
    };
    for (i, inst) in probe.iter().enumerate() {
        let e = shallow_evaluate(params, inst, use_phase)?;
        let margin = f64::from(inst.label) * e.output;
        row.loss += (1.0 - margin).max(0.0);
        row.accuracy += f64::from(u8::from(margin > 0.0));
        row.delta += e.delta;
        row.delta_a += e.delta_a;
        row.concentration += e.concentration;
        if i == 0 {
            row.cls_attention = e.cls_attention;
        }
    }
    let n = probe.len() as f64;
    row.loss /= n;
    row.accuracy /= n;
    row.delta /= n;
    row.delta_a /= n;
    row.concentration /= n;
    Ok(row)
}

/// Mini-batch SGD on the hinge loss over `(W_O, W_V, W_K, W_Q)`; `A` stays
/// fixed. Batches walk a reshuffled permutation of the data each epoch.
pub fn hinge_sgd_train(
    params: &ShallowModelParams,
    data: &[TheoryInstance],
    opts: &TrainOptions,
) -> Result<(ShallowModelParams, TrainTrace)> {
    if !(opts.lr >= 0.0) || opts.batch == 0 || data.is_empty() {
        return Err(KopeError::Parameter(format!(
            "training needs lr >= 0, batch > 0 and data (lr {}, batch {}, {} samples)",
            opts.lr,
            opts.batch,
            data.len()
        )));
    }
    let mut p = params.clone();
    let mut rng = KopeRng::new(opts.seed);
    let probe = &data[..opts.probe.clamp(1, data.len())];
    let every = opts.trace_every.max(1);
    let mut trace = TrainTrace::default();
    trace.rows.push(trace_row(&p, probe, opts.use_phase, 0)?);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 1..=opts.steps {
        let mut batch = Vec::with_capacity(opts.batch);
        while batch.len() < opts.batch.min(data.len()) {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut tape = Tape::new();
        let vars = p.trainable().map(|t| tape.leaf(t.clone()));
        let losses = batch
            .iter()
            .map(|&i| hinge_loss_tape(&mut tape, vars, &p, &data[i], opts.use_phase))
            .collect::<Result<Vec<_>>>()?;
        let stacked = tape.concat_rows(&losses)?;
        let loss = tape.mean_rows(stacked)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() || value > DIVERGENCE_LOSS {
            return Err(KopeError::TrainingDiverged { step, loss: value });
        }
        let grads = tape.backward(loss)?;
        let lr = opts.lr;
        for (t, v) in p.trainable_mut().into_iter().zip(vars) {
            let g = grads.wrt(v, t);
            for (x, gx) in t.data_mut().iter_mut().zip(g.data()) {
                *x -= lr * gx;
            }
        }
        if step % every == 0 || step == opts.steps {
            trace.rows.push(trace_row(&p, probe, opts.use_phase, step)?);
        }
    }
    Ok((p, trace))
}

/// First traced step whose mean concentration reaches `threshold`.
pub fn steps_to_concentration(trace: &TrainTrace, threshold: f64) -> Option<usize> {
    trace.rows.iter().find(|r| r.concentration >= threshold).map(|r| r.step)
}
