//! Central finite-difference verification of tape gradients.

use serde::{Deserialize, Serialize};

use crate::error::{KopeError, Result};
use crate::par::Exec;
use crate::rng::KopeRng;
use crate::tape::{Primitive, Tape, Var};
use crate::tensor::{DType, Tensor};

/// Kink-avoidance radius for ReLU inputs.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub dtype: DType,
    pub fault: Option<Primitive>,
    /// Check at most this many coordinates per parameter tensor (all when `None`).
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-6,
            dtype: DType::Double,
            fault: None,
            max_coords: None,
        }
    }
}

impl GradCheckOptions {
    /// Step and tolerance appropriate for the given precision.
    pub fn for_dtype(dtype: DType) -> Self {
        Self {
            h: match dtype {
                DType::Double => 1e-6,
                DType::Single => 1e-3,
            },
            dtype,
            ..Self::default()
        }
    }
}

impl GradCheckOptions {
    /// Points closer than this to a ReLU kink are skipped: the fixed margin,
    /// widened to twice the step when the step is larger.
    pub fn kink_margin(&self) -> f64 {
        KINK_MARGIN.max(2.0 * self.h)
    }
}

/// Tolerance on the max relative error for a precision.
pub fn tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::Double => 1e-5,
        DType::Single => 1e-2,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// `max |analytic - fd| / max(1, |fd|)` over every checked coordinate.
    pub max_rel_error: f64,
    /// Distance of the nearest ReLU input to its kink at the base point.
    pub relu_margin: f64,
    /// Coordinates skipped because a step of `h` flipped a ReLU.
    pub kink_crossings: usize,
}

fn eval<F>(f: &F, params: &[Tensor], opts: &GradCheckOptions) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_dtype(opts.dtype);
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).data()[0];
    if !v.is_finite() {
        return Err(KopeError::Evaluation(format!("objective returned {v}")));
    }
    Ok((v, tape.relu_pattern()))
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `h`, over every parameter tensor.
pub fn grad_check_multi<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_dtype(opts.dtype);
    if let Some(p) = opts.fault {
        tape.inject_fault(p);
    }
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(KopeError::Parameter("grad_check needs a scalar objective".into()));
    }
    if !tape.value(out).data()[0].is_finite() {
        return Err(KopeError::Evaluation("objective is not finite".into()));
    }
    let relu_margin = tape.min_relu_margin();
    let pattern = tape.relu_pattern();
    let mut kink_crossings = 0;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var, &params[pi]);
        let n = params[pi].len();
        let stride = match opts.max_coords {
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        for k in (0..n).step_by(stride) {
            let x0 = params[pi].data()[k];
            work[pi].data_mut()[k] = x0 + opts.h;
            let (fp, pp) = eval(&f, &work, opts)?;
            work[pi].data_mut()[k] = x0 - opts.h;
            let (fm, pm) = eval(&f, &work, opts)?;
            work[pi].data_mut()[k] = x0;
            if pp != pattern || pm != pattern {
                kink_crossings += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * opts.h);
            let rel = (analytic.data()[k] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        relu_margin,
        kink_crossings,
    })
}

/// Single-tensor convenience form; returns the max relative error.
pub fn grad_check<F>(f: F, params: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        h,
        ..GradCheckOptions::default()
    };
    grad_check_multi(|t, v| f(t, v[0]), std::slice::from_ref(params), &opts).map(|g| g.max_rel_error)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrimitiveReport {
    pub primitive: Primitive,
    pub points: usize,
    pub rejected: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

type Builder = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Input shapes, the op under test, and the extra constraints on its inputs.
fn primitive_case(p: Primitive) -> (Vec<Vec<usize>>, Builder) {
    use Primitive as P;
    match p {
        P::MatMul => (vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        P::Transpose => (vec![vec![3, 2]], |t, v| t.transpose(v[0])),
        P::Add => (vec![vec![2, 3], vec![2, 3]], |t, v| t.add(v[0], v[1])),
        P::AddRow => (vec![vec![3, 4], vec![4]], |t, v| t.add_row(v[0], v[1])),
        P::Mul => (vec![vec![2, 3], vec![2, 3]], |t, v| t.mul(v[0], v[1])),
        P::Scale => (vec![vec![2, 3]], |t, v| Ok(t.scale(v[0], -1.7))),
        P::AddScalar => (vec![vec![2, 3]], |t, v| Ok(t.add_scalar(v[0], 0.3))),
        P::ScaleBy => (vec![vec![2, 3], vec![1]], |t, v| t.scale_by(v[0], v[1])),
        P::Softplus => (vec![vec![2, 3]], |t, v| Ok(t.softplus(v[0]))),
        P::Relu => (vec![vec![2, 4]], |t, v| Ok(t.relu(v[0]))),
        P::Softmax => (vec![vec![3, 4]], |t, v| t.softmax_rows(v[0], 0.7)),
        P::LayerNorm => (vec![vec![3, 5], vec![5], vec![5]], |t, v| {
            t.layernorm(v[0], v[1], v[2], 1e-5)
        }),
        P::Rotate => (vec![vec![3, 4], vec![3, 4]], |t, v| t.rotate(v[0], v[1], -1.0)),
        P::NormalizePairs => (vec![vec![3, 4]], |t, v| t.normalize_pairs(v[0])),
        P::Project => (vec![vec![3, 4], vec![3, 4]], |t, v| t.project(v[0], v[1])),
        P::MixPairs => (vec![vec![2, 2], vec![3, 4]], |t, v| t.mix_pairs(v[0], v[1])),
        P::SliceCols => (vec![vec![3, 5]], |t, v| t.slice_cols(v[0], 1, 3)),
        P::ConcatCols => (vec![vec![3, 2], vec![3, 3]], |t, v| t.concat_cols(&[v[0], v[1]])),
        P::SliceRows => (vec![vec![4, 3]], |t, v| t.slice_rows(v[0], 1, 2)),
        P::ConcatRows => (vec![vec![1, 3], vec![2, 3]], |t, v| t.concat_rows(&[v[0], v[1]])),
        P::MeanRows => (vec![vec![4, 3]], |t, v| t.mean_rows(v[0])),
        P::Sum => (vec![vec![2, 3]], |t, v| Ok(t.sum(v[0]))),
        P::CrossEntropy => (vec![vec![3, 4]], |t, v| t.cross_entropy(v[0], &[2, 0, 3])),
    }
}

fn acceptable_point(p: Primitive, inputs: &[Tensor], opts: &GradCheckOptions) -> bool {
    match p {
        Primitive::Relu => inputs[0].data().iter().all(|v| v.abs() >= opts.kink_margin()),
        Primitive::NormalizePairs => inputs[0]
            .data()
            .chunks_exact(2)
            .all(|q| q[0].hypot(q[1]) > 0.1),
        _ => true,
    }
}

/// Checks one primitive at `points` random points drawn from `[-2, 2]`.
/// The objective is `sum(w * op(inputs))` with a random fixed weighting `w`.
pub fn check_primitive(p: Primitive, points: usize, seed: u64, opts: &GradCheckOptions) -> Result<PrimitiveReport> {
    let (shapes, build) = primitive_case(p);
    let mut rng = KopeRng::new(seed).split(p as u64);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut rejected = 0;
    while done < points {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(s.clone(), rng.uniform_vec(n, -2.0, 2.0)).expect("shape")
            })
            .collect();
        if !acceptable_point(p, &inputs, opts) {
            rejected += 1;
            continue;
        }
        let out_shape = {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
            let o = build(&mut t, &vs)?;
            t.value(o).shape().to_vec()
        };
        let n: usize = out_shape.iter().product();
        let weights = Tensor::new(out_shape, rng.uniform_vec(n, -1.0, 1.0))?;
        let objective = |t: &mut Tape, v: &[Var]| {
            let o = build(t, v)?;
            let w = t.leaf(weights.clone());
            let m = t.mul(o, w)?;
            Ok(t.sum(m))
        };
        let r = grad_check_multi(objective, &inputs, opts)?;
        worst = worst.max(r.max_rel_error);
        done += 1;
    }
    let tol = tolerance(opts.dtype);
    Ok(PrimitiveReport {
        primitive: p,
        points,
        rejected,
        max_rel_error: worst,
        tolerance: tol,
        passed: worst < tol,
    })
}

/// Runs [`check_primitive`] over every registered primitive.
pub fn primitive_suite(points: usize, seed: u64, opts: &GradCheckOptions, exec: Exec) -> Result<Vec<PrimitiveReport>> {
    exec.try_map(Primitive::ALL.len(), |i| {
        check_primitive(Primitive::ALL[i], points, seed, opts)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_zero_error() {
        let err = grad_check(|t, x| t.mul(x, x), &Tensor::scalar(3.0), 1e-6).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_finite_objective_is_an_evaluation_error() {
        let r = grad_check(|t, x| Ok(t.scale(x, f64::INFINITY)), &Tensor::scalar(1.0), 1e-6);
        assert!(matches!(r, Err(KopeError::Evaluation(_))));
    }

    #[test]
    fn every_primitive_passes_in_double() {
        let opts = GradCheckOptions::default();
        let reports = primitive_suite(100, 11, &opts, Exec::Parallel).unwrap();
        for r in &reports {
            assert!(r.passed, "{:?}", r);
        }
    }

    #[test]
    fn injected_fault_is_attributed_to_its_primitive() {
        let opts = GradCheckOptions {
            fault: Some(Primitive::Project),
            ..GradCheckOptions::default()
        };
        let reports = primitive_suite(5, 3, &opts, Exec::Sequential).unwrap();
        let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.primitive).collect();
        assert_eq!(failed, vec![Primitive::Project]);
    }
}
