//! Dense row-major tensors and the pure numeric kernels built on them.
//!
//! Every kernel here is a plain function of its inputs. The autodiff tape in
//! [`crate::tape`] records calls to these kernels and supplies the matching
//! vector-Jacobian products.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, KopeError, Result};

/// Storage precision. Values are always held as `f64`; `Single` rounds every
/// result through `f32` so that single-precision runs can be emulated exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    Double,
    Single,
}

impl DType {
    pub fn join(self, other: DType) -> DType {
        if self == DType::Single || other == DType::Single {
            DType::Single
        } else {
            DType::Double
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            );
        }
        Ok(Self {
            shape,
            data,
            dtype: DType::Double,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            dtype: DType::Double,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            dtype: DType::Double,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return dim_err("Tensor::from_rows", "ragged rows");
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        if dtype == DType::Single {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
        self
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return dim_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
            dtype: self.dtype,
        })
    }

    /// `(rows, cols)` for a rank-2 tensor; rank-1 tensors read as one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [c] => Ok((1, *c)),
            [r, c] => Ok((*r, *c)),
            s => dim_err("dims2", format!("expected rank 1 or 2, got {s:?}")),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map(|d| d.0).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map(|d| d.1).unwrap_or(0)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    fn derived(&self, shape: Vec<usize>, data: Vec<f64>, other: DType) -> Tensor {
        Tensor {
            shape,
            data,
            dtype: DType::Double,
        }
        .with_dtype(self.dtype.join(other))
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(op, format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        self.derived(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
            self.dtype,
        )
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        Ok(self.derived(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            other.dtype,
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// Adds a length-`cols` row vector to every row.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if bias.len() != c {
            return dim_err("add_row", format!("bias len {} vs cols {c}", bias.len()));
        }
        let mut out = self.data.clone();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(self.derived(self.shape.clone(), out, bias.dtype))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(self.derived(vec![c, r], out, self.dtype))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.dims2()?;
        let (k2, m) = other.dims2()?;
        if k != k2 {
            return dim_err(
                "matmul",
                format!("inner dimensions {:?} x {:?}", self.shape, other.shape),
            );
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(self.derived(vec![n, m], out, other.dtype))
    }

    /// Row-wise softmax of `x / temperature`, stabilised by max subtraction.
    pub fn softmax_rows(&self, temperature: f64) -> Result<Tensor> {
        if !(temperature > 0.0) {
            return Err(KopeError::Parameter(format!(
                "softmax temperature must be > 0, got {temperature}"
            )));
        }
        let (r, c) = self.dims2()?;
        if c == 0 {
            return dim_err("softmax_rows", "last dimension must be >= 1");
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for (oj, &x) in o.iter_mut().zip(row) {
                *oj = ((x - max) / temperature).exp();
                total += *oj;
            }
            for oj in o.iter_mut() {
                *oj /= total;
            }
        }
        Ok(self.derived(self.shape.clone(), out, self.dtype))
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if start + len > c {
            return dim_err("slice_cols", format!("{start}+{len} > {c}"));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Ok(self.derived(vec![r, len], out, self.dtype))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if start + len > r {
            return dim_err("slice_rows", format!("{start}+{len} > {r}"));
        }
        Ok(self.derived(
            vec![len, c],
            self.data[start * c..(start + len) * c].to_vec(),
            self.dtype,
        ))
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let r = parts.first().map_or(0, |p| p.rows());
        if parts.iter().any(|p| p.rows() != r) {
            return dim_err("concat_cols", "row counts differ");
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        let mut dtype = DType::Double;
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(p.row(i));
                dtype = dtype.join(p.dtype);
            }
        }
        Ok(Tensor {
            shape: vec![r, total],
            data: out,
            dtype,
        })
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let c = parts.first().map_or(0, |p| p.cols());
        if parts.iter().any(|p| p.cols() != c) {
            return dim_err("concat_rows", "column counts differ");
        }
        let mut out = Vec::new();
        let mut r = 0;
        let mut dtype = DType::Double;
        for p in parts {
            out.extend_from_slice(&p.data);
            r += p.rows();
            dtype = dtype.join(p.dtype);
        }
        Ok(Tensor {
            shape: vec![r, c],
            data: out,
            dtype,
        })
    }
}

/// Cached intermediates of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Per-row layer normalization with affine gain and bias.
pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<(Tensor, LayerNormCache)> {
    if !(eps > 0.0) {
        return Err(KopeError::Parameter(format!("layernorm eps must be > 0, got {eps}")));
    }
    let (r, c) = x.dims2()?;
    if gain.len() != c || bias.len() != c {
        return dim_err("layernorm", format!("gain/bias must have {c} entries"));
    }
    let mut xhat = vec![0.0; r * c];
    let mut out = vec![0.0; r * c];
    let mut inv_std = vec![0.0; r];
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let s = 1.0 / (var + eps).sqrt();
        inv_std[i] = s;
        for j in 0..c {
            let h = (row[j] - mean) * s;
            xhat[i * c + j] = h;
            out[i * c + j] = h * gain.data[j] + bias.data[j];
        }
    }
    let dtype = x.dtype.join(gain.dtype).join(bias.dtype);
    let normalized = Tensor::new(vec![r, c], xhat)?.with_dtype(dtype);
    let y = Tensor::new(x.shape.clone(), out)?.with_dtype(dtype);
    Ok((y, LayerNormCache { normalized, inv_std }))
}

/// Norm floor below which a (cos, sin) pair is treated as corrupted.
pub const PAIR_NORM_FLOOR: f64 = 1e-12;

fn check_pairs(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let (r, c) = x.dims2()?;
    if c % 2 != 0 {
        return dim_err(op, format!("pair layout needs an even column count, got {c}"));
    }
    Ok((r, c / 2))
}

/// Divides each consecutive `(x[2j], x[2j+1])` pair by its Euclidean norm.
pub fn normalize_pairs(x: &Tensor) -> Result<Tensor> {
    check_pairs(x, "normalize_pairs")?;
    let mut out = x.data.clone();
    for (p, pair) in out.chunks_exact_mut(2).enumerate() {
        let n = pair[0].hypot(pair[1]);
        if !(n >= PAIR_NORM_FLOOR) {
            return Err(KopeError::DegeneratePhase { index: p, norm: n });
        }
        pair[0] /= n;
        pair[1] /= n;
    }
    Ok(x.derived(x.shape.clone(), out, x.dtype))
}

/// Per pair: `drive - <drive, state> state`.
pub fn project_pairs(state: &Tensor, drive: &Tensor) -> Result<Tensor> {
    check_pairs(state, "project_pairs")?;
    state.same_shape(drive, "project_pairs")?;
    let mut out = drive.data.clone();
    for (o, s) in out.chunks_exact_mut(2).zip(state.data.chunks_exact(2)) {
        let dot = o[0] * s[0] + o[1] * s[1];
        o[0] -= dot * s[0];
        o[1] -= dot * s[1];
    }
    Ok(state.derived(state.shape.clone(), out, drive.dtype))
}

/// Rotates each coordinate pair of `v` by the angle whose `(cos, sin)` is the
/// matching pair of `pairs`, or by its negative when `sign < 0`.
pub fn rotate_pairs(v: &Tensor, pairs: &Tensor, sign: f64) -> Result<Tensor> {
    check_pairs(v, "rotate_pairs")?;
    v.same_shape(pairs, "rotate_pairs")?;
    let mut out = v.data.clone();
    for (o, p) in out.chunks_exact_mut(2).zip(pairs.data.chunks_exact(2)) {
        let (c, s) = (p[0], sign * p[1]);
        let (a, b) = (o[0], o[1]);
        o[0] = c * a - s * b;
        o[1] = s * a + c * b;
    }
    Ok(v.derived(v.shape.clone(), out, pairs.dtype))
}

/// Linear mixing of phase subspaces: `out[l, (i, c)] = sum_j mix[i, j] pairs[l, (j, c)]`.
pub fn mix_pairs(mix: &Tensor, pairs: &Tensor) -> Result<Tensor> {
    let (r, p) = check_pairs(pairs, "mix_pairs")?;
    let (mi, mj) = mix.dims2()?;
    if mi != p || mj != p {
        return dim_err("mix_pairs", format!("mixer {mi}x{mj} vs {p} pairs"));
    }
    let mut out = vec![0.0; r * 2 * p];
    for l in 0..r {
        for i in 0..p {
            let (mut c0, mut c1) = (0.0, 0.0);
            for j in 0..p {
                let m = mix.data[i * p + j];
                c0 += m * pairs.data[l * 2 * p + 2 * j];
                c1 += m * pairs.data[l * 2 * p + 2 * j + 1];
            }
            out[l * 2 * p + 2 * i] = c0;
            out[l * 2 * p + 2 * i + 1] = c1;
        }
    }
    Ok(pairs.derived(pairs.shape.clone(), out, mix.dtype))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::KopeRng;

    fn random(shape: &[usize], rng: &mut KopeRng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), rng.uniform_vec(n, -2.0, 2.0)).unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (n, k) = a.dims2().unwrap();
        let m = b.cols();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    out[i * m + j] += a.at(i, p) * b.at(p, j);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut rng = KopeRng::new(1);
        let a = random(&[3, 3], &mut rng);
        assert_eq!(Tensor::eye(3).matmul(&a).unwrap(), a);
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let y = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(x.matmul(&y).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = KopeRng::new(2);
        let a = random(&[5, 4], &mut rng);
        let b = random(&[4, 3], &mut rng);
        let got = a.matmul(&b).unwrap();
        for (g, e) in got.data().iter().zip(triple_loop(&a, &b)) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(KopeError::Dimension { .. })));
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = KopeRng::new(3);
        for _ in 0..20 {
            let a = random(&[4, 5], &mut rng);
            let b = random(&[5, 3], &mut rng);
            let c = random(&[3, 6], &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let rel = left.sub(&right).unwrap().norm() / left.norm().max(1e-300);
            assert!(rel < 1e-9);
        }
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
        for v in x.softmax_rows(1.0).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let s = big.softmax_rows(1.0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1].abs() < 1e-12);
        assert!(x.softmax_rows(0.0).is_err());
    }

    #[test]
    fn softmax_matches_extended_precision_reference() {
        // e^1, e^2, e^3 normalized; reference digits from a 50-digit evaluation.
        let reference = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ];
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = x.softmax_rows(1.0).unwrap();
        for (a, b) in s.data().iter().zip(reference) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn layernorm_cases() {
        let g = Tensor::filled(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        let (y, _) = layernorm(&Tensor::filled(&[1, 4], 3.5), &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));

        let g2 = Tensor::filled(&[2], 1.0);
        let b2 = Tensor::zeros(&[2]);
        let x = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let (y, _) = layernorm(&x, &g2, &b2, 1e-14).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);

        let mut rng = KopeRng::new(4);
        let x = random(&[3, 16], &mut rng);
        let g = Tensor::filled(&[16], 1.0);
        let b = Tensor::zeros(&[16]);
        let (y, _) = layernorm(&x, &g, &b, 1e-12).unwrap();
        for i in 0..3 {
            let row = y.row(i);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn pair_kernels() {
        let x = Tensor::new(vec![1, 4], vec![3.0, 4.0, 1.0, 0.0]).unwrap();
        let n = normalize_pairs(&x).unwrap();
        assert_eq!(n.data(), &[0.6, 0.8, 1.0, 0.0]);
        let bad = Tensor::new(vec![1, 2], vec![0.0, 1e-13]).unwrap();
        assert!(matches!(normalize_pairs(&bad), Err(KopeError::DegeneratePhase { .. })));

        let state = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let drive = Tensor::new(vec![1, 2], vec![5.0, 2.0]).unwrap();
        assert_eq!(project_pairs(&state, &drive).unwrap().data(), &[0.0, 2.0]);

        let v = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let quarter = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let r = rotate_pairs(&v, &quarter, 1.0).unwrap();
        assert!(r.data()[0].abs() < 1e-15 && (r.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_precision_rounds() {
        let x = Tensor::new(vec![1], vec![0.1]).unwrap().with_dtype(DType::Single);
        assert_eq!(x.data()[0], 0.1f32 as f64);
        let y = x.scale(3.0);
        assert_eq!(y.dtype(), DType::Single);
        assert_eq!(y.data()[0], (0.1f32 as f64 * 3.0) as f32 as f64);
    }
}
