//! Record-and-replay reverse-mode differentiation over a fixed primitive set.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Each
//! primitive stores the handles of its operands plus whatever cache its
//! vector-Jacobian product needs; [`Tape::backward`] walks the records in
//! reverse. One tape per training step, never shared between threads.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::tensor::{self, DType, LayerNormCache, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The registered primitives. Used for fault injection and per-primitive
/// gradient reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    MatMul,
    Transpose,
    Add,
    AddRow,
    Mul,
    Scale,
    AddScalar,
    ScaleBy,
    Softplus,
    Relu,
    Softmax,
    LayerNorm,
    Rotate,
    NormalizePairs,
    Project,
    MixPairs,
    SliceCols,
    ConcatCols,
    SliceRows,
    ConcatRows,
    MeanRows,
    Sum,
    CrossEntropy,
}

impl Primitive {
    pub const ALL: [Primitive; 23] = [
        Primitive::MatMul,
        Primitive::Transpose,
        Primitive::Add,
        Primitive::AddRow,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::AddScalar,
        Primitive::ScaleBy,
        Primitive::Softplus,
        Primitive::Relu,
        Primitive::Softmax,
        Primitive::LayerNorm,
        Primitive::Rotate,
        Primitive::NormalizePairs,
        Primitive::Project,
        Primitive::MixPairs,
        Primitive::SliceCols,
        Primitive::ConcatCols,
        Primitive::SliceRows,
        Primitive::ConcatRows,
        Primitive::MeanRows,
        Primitive::Sum,
        Primitive::CrossEntropy,
    ];
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        f.write_str(&s)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Softplus(Var),
    Relu(Var),
    Softmax { x: Var, temperature: f64 },
    LayerNorm { x: Var, gain: Var, bias: Var, cache: LayerNormCache },
    Rotate { v: Var, pairs: Var, sign: f64 },
    NormalizePairs { x: Var, norms: Vec<f64> },
    Project { state: Var, drive: Var },
    MixPairs { mix: Var, pairs: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
}

impl Op {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Transpose(..) => Primitive::Transpose,
            Op::Add(..) => Primitive::Add,
            Op::AddRow(..) => Primitive::AddRow,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::AddScalar(..) => Primitive::AddScalar,
            Op::ScaleBy(..) => Primitive::ScaleBy,
            Op::Softplus(..) => Primitive::Softplus,
            Op::Relu(..) => Primitive::Relu,
            Op::Softmax { .. } => Primitive::Softmax,
            Op::LayerNorm { .. } => Primitive::LayerNorm,
            Op::Rotate { .. } => Primitive::Rotate,
            Op::NormalizePairs { .. } => Primitive::NormalizePairs,
            Op::Project { .. } => Primitive::Project,
            Op::MixPairs { .. } => Primitive::MixPairs,
            Op::SliceCols { .. } => Primitive::SliceCols,
            Op::ConcatCols(..) => Primitive::ConcatCols,
            Op::SliceRows { .. } => Primitive::SliceRows,
            Op::ConcatRows(..) => Primitive::ConcatRows,
            Op::MeanRows(..) => Primitive::MeanRows,
            Op::Sum(..) => Primitive::Sum,
            Op::CrossEntropy { .. } => Primitive::CrossEntropy,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    dtype: DType,
    fault: Option<Primitive>,
}

/// Gradients of one scalar with respect to every recorded value.
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v` shaped like `like`, or zeros when nothing flowed to it.
    pub fn wrt(&self, v: Var, like: &Tensor) -> Tensor {
        match self.get(v) {
            Some(g) if g.shape() == like.shape() => g.clone(),
            Some(g) => g.reshape(like.shape().to_vec()).expect("gradient size matches its leaf"),
            None => Tensor::zeros(like.shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dtype(dtype: DType) -> Self {
        Self {
            dtype,
            ..Self::default()
        }
    }

    /// Corrupts the backward rule of one primitive (scales it by 1.5).
    /// Exists so gradient checkers can prove they catch a bad rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, primitive: Primitive) {
        self.fault = Some(primitive);
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let v = value.with_dtype(self.dtype);
        self.push(v, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Smallest `|x|` over every ReLU input on the tape; finite-difference
    /// checks reject points closer than a threshold to the kink.
    pub fn min_relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Which ReLU inputs on the tape are positive, in tape order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|v| *v > 0.0))
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    /// `x W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a))
    }

    /// Multiplies a tensor by a one-element tensor recorded on the tape.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return dim_err("scale_by", "scale must have exactly one element");
        }
        let c = self.value(s).data()[0];
        let out = self.value(a).scale(c);
        Ok(self.push(out, Op::ScaleBy(a, s)))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        self.push(out, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let out = self.value(x).softmax_rows(temperature)?;
        Ok(self.push(out, Op::Softmax { x, temperature }))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, cache) = tensor::layernorm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, cache }))
    }

    pub fn rotate(&mut self, v: Var, pairs: Var, sign: f64) -> Result<Var> {
        let out = tensor::rotate_pairs(self.value(v), self.value(pairs), sign)?;
        Ok(self.push(out, Op::Rotate { v, pairs, sign }))
    }

    pub fn normalize_pairs(&mut self, x: Var) -> Result<Var> {
        let out = tensor::normalize_pairs(self.value(x))?;
        let norms = self
            .value(x)
            .data()
            .chunks_exact(2)
            .map(|p| p[0].hypot(p[1]))
            .collect();
        Ok(self.push(out, Op::NormalizePairs { x, norms }))
    }

    pub fn project(&mut self, state: Var, drive: Var) -> Result<Var> {
        let out = tensor::project_pairs(self.value(state), self.value(drive))?;
        Ok(self.push(out, Op::Project { state, drive }))
    }

    pub fn mix_pairs(&mut self, mix: Var, pairs: Var) -> Result<Var> {
        let out = tensor::mix_pairs(self.value(mix), self.value(pairs))?;
        Ok(self.push(out, Op::MixPairs { mix, pairs }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat_cols(&vals)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(self.value(x).row(i)) {
                *o += v / r as f64;
            }
        }
        let t = Tensor::new(vec![1, c], out)?.with_dtype(self.value(x).dtype());
        Ok(self.push(t, Op::MeanRows(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum()).with_dtype(self.value(x).dtype());
        self.push(t, Op::Sum(x))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.value(logits).dims2()?;
        if labels.len() != b || labels.iter().any(|&y| y >= c) {
            return dim_err("cross_entropy", format!("{} labels for {b}x{c} logits", labels.len()));
        }
        let probs = self.value(logits).softmax_rows(1.0)?;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs.at(i, y).max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / b as f64;
        let t = Tensor::scalar(loss).with_dtype(self.value(logits).dtype());
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return dim_err("backward", "loss must be a single scalar");
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut contribs = self.vjp(node, &g)?;
            if self.fault.is_some() && node.op.primitive() == self.fault {
                for (_, t) in &mut contribs {
                    *t = t.scale(1.5);
                }
            }
            for (var, t) in contribs {
                match &mut grads[var.0] {
                    Some(acc) => *acc = acc.add(&t)?,
                    slot @ None => *slot = Some(t),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Grads(grads))
    }

    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => vec![
                (*a, g.matmul(&val(*b).transpose()?)?),
                (*b, val(*a).transpose()?.matmul(g)?),
            ],
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(x, b) => {
                let (r, c) = g.dims2()?;
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for (d, v) in db.iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                vec![
                    (*x, g.clone()),
                    (*b, Tensor::new(val(*b).shape().to_vec(), db)?),
                ]
            }
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::ScaleBy(a, s) => {
                let c = val(*s).data()[0];
                let ds = g.mul(val(*a))?.sum();
                vec![
                    (*a, g.scale(c)),
                    (*s, Tensor::new(val(*s).shape().to_vec(), vec![ds])?),
                ]
            }
            Op::Softplus(a) => vec![(*a, g.zip_with(val(*a), "softplus", |gi, x| gi * sigmoid(x))?)],
            Op::Relu(a) => vec![(
                *a,
                g.zip_with(val(*a), "relu", |gi, x| if x > 0.0 { gi } else { 0.0 })?,
            )],
            Op::Softmax { x, temperature } => {
                let y = &node.value;
                let (r, c) = y.dims2()?;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - dot) / temperature;
                    }
                }
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), dx)?)]
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let xhat = &cache.normalized;
                let (r, c) = xhat.dims2()?;
                let gd = val(*gain).data();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let (gr, hr) = (g.row(i), xhat.row(i));
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..c {
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                        let d = gr[j] * gd[j];
                        mean_d += d;
                        mean_dh += d * hr[j];
                    }
                    mean_d /= c as f64;
                    mean_dh /= c as f64;
                    let s = cache.inv_std[i];
                    for j in 0..c {
                        let d = gr[j] * gd[j];
                        dx[i * c + j] = s * (d - mean_d - hr[j] * mean_dh);
                    }
                }
                vec![
                    (*x, Tensor::new(val(*x).shape().to_vec(), dx)?),
                    (*gain, Tensor::new(val(*gain).shape().to_vec(), dg)?),
                    (*bias, Tensor::new(val(*bias).shape().to_vec(), db)?),
                ]
            }
            Op::Rotate { v, pairs, sign } => {
                let (vd, pd) = (val(*v).data(), val(*pairs).data());
                let mut dv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; pd.len()];
                for k in 0..vd.len() / 2 {
                    let (a, b) = (vd[2 * k], vd[2 * k + 1]);
                    let (c, s) = (pd[2 * k], sign * pd[2 * k + 1]);
                    let (g0, g1) = (g.data()[2 * k], g.data()[2 * k + 1]);
                    dv[2 * k] = c * g0 + s * g1;
                    dv[2 * k + 1] = -s * g0 + c * g1;
                    dp[2 * k] = a * g0 + b * g1;
                    dp[2 * k + 1] = sign * (-b * g0 + a * g1);
                }
                vec![
                    (*v, Tensor::new(val(*v).shape().to_vec(), dv)?),
                    (*pairs, Tensor::new(val(*pairs).shape().to_vec(), dp)?),
                ]
            }
            Op::NormalizePairs { x, norms } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for (k, n) in norms.iter().enumerate() {
                    let (y0, y1) = (y[2 * k], y[2 * k + 1]);
                    let (g0, g1) = (g.data()[2 * k], g.data()[2 * k + 1]);
                    let dot = g0 * y0 + g1 * y1;
                    dx[2 * k] = (g0 - dot * y0) / n;
                    dx[2 * k + 1] = (g1 - dot * y1) / n;
                }
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), dx)?)]
            }
            Op::Project { state, drive } => {
                let (sd, dd) = (val(*state).data(), val(*drive).data());
                let mut ds = vec![0.0; sd.len()];
                let mut ddrive = vec![0.0; dd.len()];
                for k in 0..sd.len() / 2 {
                    let (s0, s1) = (sd[2 * k], sd[2 * k + 1]);
                    let (d0, d1) = (dd[2 * k], dd[2 * k + 1]);
                    let (g0, g1) = (g.data()[2 * k], g.data()[2 * k + 1]);
                    let ds_dot = d0 * s0 + d1 * s1;
                    let gs_dot = g0 * s0 + g1 * s1;
                    ddrive[2 * k] = g0 - gs_dot * s0;
                    ddrive[2 * k + 1] = g1 - gs_dot * s1;
                    ds[2 * k] = -(ds_dot * g0 + gs_dot * d0);
                    ds[2 * k + 1] = -(ds_dot * g1 + gs_dot * d1);
                }
                vec![
                    (*state, Tensor::new(val(*state).shape().to_vec(), ds)?),
                    (*drive, Tensor::new(val(*drive).shape().to_vec(), ddrive)?),
                ]
            }
            Op::MixPairs { mix, pairs } => {
                let (md, pd) = (val(*mix).data(), val(*pairs).data());
                let (rows, cols) = val(*pairs).dims2()?;
                let p = cols / 2;
                let mut dm = vec![0.0; p * p];
                let mut dp = vec![0.0; pd.len()];
                for l in 0..rows {
                    for i in 0..p {
                        let g0 = g.data()[l * cols + 2 * i];
                        let g1 = g.data()[l * cols + 2 * i + 1];
                        for j in 0..p {
                            let r0 = pd[l * cols + 2 * j];
                            let r1 = pd[l * cols + 2 * j + 1];
                            dm[i * p + j] += g0 * r0 + g1 * r1;
                            let m = md[i * p + j];
                            dp[l * cols + 2 * j] += m * g0;
                            dp[l * cols + 2 * j + 1] += m * g1;
                        }
                    }
                }
                vec![
                    (*mix, Tensor::new(val(*mix).shape().to_vec(), dm)?),
                    (*pairs, Tensor::new(val(*pairs).shape().to_vec(), dp)?),
                ]
            }
            Op::SliceCols { x, start } => {
                let (r, c) = val(*x).dims2()?;
                let len = g.cols();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), dx)?)]
            }
            Op::ConcatCols(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    out.push((*p, g.slice_cols(offset, w)?.reshape(val(*p).shape().to_vec())?));
                    offset += w;
                }
                out
            }
            Op::SliceRows { x, start } => {
                let (r, c) = val(*x).dims2()?;
                let mut dx = vec![0.0; r * c];
                dx[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), dx)?)]
            }
            Op::ConcatRows(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let h = val(*p).rows();
                    out.push((*p, g.slice_rows(offset, h)?.reshape(val(*p).shape().to_vec())?));
                    offset += h;
                }
                out
            }
            Op::MeanRows(x) => {
                let (r, c) = val(*x).dims2()?;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g.data()[j] / r as f64;
                    }
                }
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), dx)?)]
            }
            Op::Sum(x) => vec![(*x, Tensor::filled(val(*x).shape(), g.data()[0]))],
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len() as f64;
                let mut d = probs.clone();
                let c = d.cols();
                for (i, &y) in labels.iter().enumerate() {
                    d.data_mut()[i * c + y] -= 1.0;
                }
                vec![(*logits, d.scale(g.data()[0] / b))]
            }
        })
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
