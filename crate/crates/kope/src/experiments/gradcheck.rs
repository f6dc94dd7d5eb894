use anyhow::Result;
use kope_core::gradcheck::{grad_check_multi, primitive_suite, tolerance, GradCheckOptions, PrimitiveReport};
use kope_core::model::{forward_tape, hinge_loss, ModelConfig, ModelParams, Variant};
use kope_core::theory::{gen_dataset, hinge_loss_tape, ShallowConfig, ShallowModelParams, TheoryDataConfig};
use kope_core::{DType, Exec, KopeRng, Primitive, Tape, Tensor, Var};
use serde::Serialize;

use crate::config::RunConfig;

/// Draws tried per model check before giving up on finding a kink-free point.
const MAX_DRAWS: u64 = 50;

#[derive(Clone, Debug, Serialize)]
pub struct ModelCheck {
    pub name: String,
    /// Points checked away from ReLU kinks.
    pub points: usize,
    /// Draws skipped for sitting within the kink margin.
    pub rejected: usize,
    /// Coordinates skipped because a difference step flipped a ReLU.
    pub kink_crossings: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub dtype: DType,
    pub step: f64,
    pub tolerance: f64,
    pub primitives: Vec<PrimitiveReport>,
    pub models: Vec<ModelCheck>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failed_primitives(&self) -> Vec<Primitive> {
        self.primitives.iter().filter(|r| !r.passed).map(|r| r.primitive).collect()
    }
}

/// Depth-2 model small enough for per-coordinate differencing.
pub fn check_model_config(variant: Variant, classes: usize) -> ModelConfig {
    let mut cfg = ModelConfig {
        width: 8,
        heads: 2,
        ..ModelConfig::toy((2, 2), 4, classes, variant)
    };
    cfg.mixer_scale = 0.1;
    cfg.kuramoto.gamma = 0.2;
    cfg
}

fn repeat_check<F>(name: &str, wanted: usize, opts: &GradCheckOptions, mut attempt: F) -> Result<ModelCheck>
where
    F: FnMut(u64, &GradCheckOptions) -> Result<kope_core::gradcheck::GradCheck>,
{
    let tol = tolerance(opts.dtype);
    let mut worst: f64 = 0.0;
    let mut points = 0;
    let mut rejected = 0;
    let mut kink_crossings = 0;
    for draw in 0..MAX_DRAWS {
        if points == wanted {
            break;
        }
        let r = attempt(draw, opts)?;
        if r.relu_margin < opts.kink_margin() {
            rejected += 1;
            continue;
        }
        worst = worst.max(r.max_rel_error);
        kink_crossings += r.kink_crossings;
        points += 1;
    }
    Ok(ModelCheck {
        name: name.to_string(),
        points,
        rejected,
        kink_crossings,
        max_rel_error: worst,
        passed: points == wanted && worst < tol,
    })
}

fn model_check(variant: Variant, hinge: bool, seeds: usize, base: u64, opts: &GradCheckOptions) -> Result<ModelCheck> {
    let cfg = check_model_config(variant, if hinge { 2 } else { 3 });
    let name = format!("{}_{}", variant, if hinge { "hinge" } else { "cross_entropy" });
    repeat_check(&name, seeds, opts, |draw, opts| {
        let seed = base.wrapping_add(draw);
        let params = ModelParams::init(&cfg, seed)?;
        let n = cfg.tokens() - 1;
        let x = Tensor::new(
            vec![n, cfg.input_dim],
            KopeRng::new(seed).split(7).normal_vec(n * cfg.input_dim, 1.0),
        )?;
        let label = (seed % 2) as usize;
        let f = |tape: &mut Tape, vars: &[Var]| {
            let bound = params.assemble(vars.to_vec());
            let out = forward_tape(tape, &bound, &cfg, &x)?;
            if hinge {
                hinge_loss(tape, out.logits, label)
            } else {
                tape.cross_entropy(out.logits, &[label])
            }
        };
        Ok(grad_check_multi(f, &params.leaf_values(), opts)?)
    })
}

fn shallow_check(seeds: usize, base: u64, opts: &GradCheckOptions) -> Result<ModelCheck> {
    let data = TheoryDataConfig {
        tokens: 4,
        samples: 2,
        ..TheoryDataConfig::default()
    };
    let model = ShallowConfig {
        hidden: 4,
        sigma: 0.3,
        ..ShallowConfig::default()
    };
    repeat_check("shallow_hinge", seeds, opts, |draw, opts| {
        let seed = base.wrapping_add(draw);
        let ds = gen_dataset(&data, seed)?;
        let p = ShallowModelParams::init(&model, &ds.patterns, data.tokens, seed)?;
        let inst = &ds.instances[0];
        let f = |tape: &mut Tape, v: &[Var]| hinge_loss_tape(tape, [v[0], v[1], v[2], v[3]], &p, inst, true);
        let params: Vec<Tensor> = p.trainable().into_iter().cloned().collect();
        Ok(grad_check_multi(f, &params, opts)?)
    })
}

/// Every primitive at random points, then end-to-end models. `fault`
/// corrupts one primitive's gradient rule for self-tests.
pub fn run_gradcheck(cfg: &RunConfig, seed: u64, fault: Option<Primitive>, exec: Exec) -> Result<GradcheckReport> {
    let opts = GradCheckOptions {
        fault,
        ..GradCheckOptions::for_dtype(cfg.gradcheck.dtype)
    };
    let primitives = primitive_suite(cfg.gradcheck.points, seed, &opts, exec)?;
    let n = cfg.gradcheck.model_seeds;
    let models = vec![
        model_check(Variant::Kope, false, n, seed, &opts)?,
        model_check(Variant::Kope, true, n, seed, &opts)?,
        model_check(Variant::Vit, false, n, seed, &opts)?,
        shallow_check(n, seed, &opts)?,
    ];
    let passed = primitives.iter().all(|r| r.passed) && models.iter().all(|m| m.passed);
    Ok(GradcheckReport {
        dtype: opts.dtype,
        step: opts.h,
        tolerance: tolerance(opts.dtype),
        primitives,
        models,
        passed,
    })
}
