use kope_core::gradcheck::{grad_check_multi, GradCheckOptions, KINK_MARGIN};
use kope_core::model::{
    count_flops, count_params, forward, forward_tape, hinge_loss, initial_phases, load_checkpoint, read_checkpoint,
    save_checkpoint, write_checkpoint, ModelConfig, ModelParams, PhaseInitMode, Variant,
};
use kope_core::{KopeRng, Tape, Tensor, Var};

type M = Vec<Vec<f64>>;

fn rows(t: &Tensor) -> M {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn affine(x: &M, w: &Tensor, b: Option<&Tensor>) -> M {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|o| {
                    let dot: f64 = row.iter().enumerate().map(|(k, v)| v * w.at(k, o)).sum();
                    dot + b.map_or(0.0, |b| b.data()[o])
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &M, g: &Tensor, b: &Tensor, eps: f64) -> M {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * g.data()[j] + b.data()[j])
                .collect()
        })
        .collect()
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn rotate(v: &[f64], ph: &[(f64, f64)], sign: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    for (j, (c, s)) in ph.iter().enumerate() {
        let s = sign * s;
        out[2 * j] = c * v[2 * j] - s * v[2 * j + 1];
        out[2 * j + 1] = s * v[2 * j] + c * v[2 * j + 1];
    }
    out
}

/// Straight-line forward of the phase-coupled model for one sample.
fn oracle_logits(p: &ModelParams, cfg: &ModelConfig, input: &Tensor) -> Vec<f64> {
    let (d, heads) = (cfg.width, cfg.heads);
    let dh = d / heads;
    let pairs = dh / 2;
    let quarter = dh / 4;
    let t = cfg.tokens();
    let eps = cfg.layernorm_eps;

    let e = affine(&rows(input), &p.embed_w, Some(&p.embed_b));
    let mut z: M = std::iter::once(p.cls.row(0).to_vec()).chain(e).collect();
    for (i, row) in z.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += p.pos.at(i, j);
        }
    }
    // r[token][head][pair] = (cos, sin); token 1 + y * w + x.
    let mut r = vec![vec![vec![(1.0, 0.0); pairs]; heads]; t];
    for tok in 1..t {
        let (y, x) = ((tok - 1) / cfg.grid.1, (tok - 1) % cfg.grid.1);
        for h in 0..heads {
            for j in 0..pairs {
                let (pos, k) = if j < quarter { (x, j) } else { (y, j - quarter) };
                let a = pos as f64 * cfg.phase_base.powf(-(k as f64) / quarter as f64);
                r[tok][h][j] = (a.cos(), a.sin());
            }
        }
    }
    let gamma = cfg.kuramoto.gamma;
    for layer in &p.layers {
        let mix = layer.mixer.as_ref().unwrap();
        let mut mixed = r.clone();
        for tok in 0..t {
            for h in 0..heads {
                for i in 0..pairs {
                    let (mut c, mut s) = (0.0, 0.0);
                    for k in 0..pairs {
                        let m = mix.mix.data()[(h * pairs + i) * pairs + k];
                        c += m * r[tok][h][k].0;
                        s += m * r[tok][h][k].1;
                    }
                    let n = (c * c + s * s).sqrt();
                    mixed[tok][h][i] = (c / n, s / n);
                }
            }
        }
        let u = layer_norm(&z, &layer.ln1_gain, &layer.ln1_bias, eps);
        let a = &layer.attn;
        let q = affine(&u, &a.w_q, Some(&a.b_q));
        let k = affine(&u, &a.w_k, Some(&a.b_k));
        let v = affine(&u, &a.w_v, Some(&a.b_v));
        let mut cat = vec![vec![0.0; d]; t];
        for h in 0..heads {
            let part = |m: &M, i: usize| m[i][h * dh..(h + 1) * dh].to_vec();
            let qs: M = (0..t).map(|i| rotate(&part(&q, i), &mixed[i][h], 1.0)).collect();
            let ks: M = (0..t).map(|i| rotate(&part(&k, i), &mixed[i][h], 1.0)).collect();
            let vs: M = (0..t).map(|i| rotate(&part(&v, i), &mixed[i][h], 1.0)).collect();
            for m in 0..t {
                let s: Vec<f64> = (0..t)
                    .map(|n| (0..dh).map(|c| qs[m][c] * ks[n][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let w = softmax(&s);
                let o: Vec<f64> = (0..dh).map(|c| (0..t).map(|n| w[n] * vs[n][c]).sum()).collect();
                let o = rotate(&o, &mixed[m][h], -1.0);
                cat[m][h * dh..(h + 1) * dh].copy_from_slice(&o);
            }
        }
        let att = affine(&cat, &a.w_o, Some(&a.b_o));
        let z1: M = z.iter().zip(&att).map(|(x, y)| x.iter().zip(y).map(|(a, b)| a + b).collect()).collect();
        let u2 = layer_norm(&z1, &layer.ln2_gain, &layer.ln2_bias, eps);
        let hid: M = affine(&u2, &layer.mlp_w1, Some(&layer.mlp_b1))
            .into_iter()
            .map(|row| row.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        let mlp = affine(&hid, &layer.mlp_w2, Some(&layer.mlp_b2));
        let z2: M = z1.iter().zip(&mlp).map(|(x, y)| x.iter().zip(y).map(|(a, b)| a + b).collect()).collect();

        let cp = p.coupling.as_ref().unwrap();
        let cq = affine(&z2, &cp.h_q, None);
        let ck = affine(&z2, &cp.h_k, None);
        let mut next = r.clone();
        for h in 0..heads {
            for i in 0..t {
                let s: Vec<f64> = (0..t)
                    .map(|j| (h * dh..(h + 1) * dh).map(|c| cq[i][c] * ck[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let jrow = softmax(&s);
                for pr in 0..pairs {
                    let (mut dc, mut ds) = (0.0, 0.0);
                    for j in 0..t {
                        dc += jrow[j] * r[j][h][pr].0;
                        ds += jrow[j] * r[j][h][pr].1;
                    }
                    let (rc, rs) = r[i][h][pr];
                    let dot = dc * rc + ds * rs;
                    let (pc, ps) = (dc - dot * rc, ds - dot * rs);
                    let (nc, ns) = (rc + gamma * pc, rs + gamma * ps);
                    let n = (nc * nc + ns * ns).sqrt();
                    next[i][h][pr] = (nc / n, ns / n);
                }
            }
        }
        r = next;
        z = z2;
    }
    let zf = layer_norm(&z, &p.final_gain, &p.final_bias, eps);
    affine(&zf[..1].to_vec(), &p.head_w, Some(&p.head_b))[0].clone()
}

fn toy(variant: Variant) -> ModelConfig {
    ModelConfig {
        width: 8,
        heads: 2,
        ..ModelConfig::toy((2, 2), 4, 3, variant)
    }
}

fn input(cfg: &ModelConfig, seed: u64) -> Tensor {
    let n = cfg.tokens() - 1;
    Tensor::new(vec![n, cfg.input_dim], KopeRng::new(seed).normal_vec(n * cfg.input_dim, 1.0)).unwrap()
}

#[test]
fn forward_matches_straight_line_oracle() {
    for seed in 0..4 {
        let mut cfg = toy(Variant::Kope);
        cfg.kuramoto.gamma = 0.3;
        cfg.mixer_scale = 0.2;
        cfg.phase_base = 3.0;
        let params = ModelParams::init(&cfg, seed).unwrap();
        let x = input(&cfg, 100 + seed);
        let (logits, _) = forward(&params, &cfg, &x, false).unwrap();
        let oracle = oracle_logits(&params, &cfg, &x);
        for (a, b) in logits.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn degenerate_kope_matches_vit() {
    let mut cfg = toy(Variant::Kope);
    cfg.kuramoto.gamma = 0.0;
    cfg.phase_init = PhaseInitMode::Zero;
    cfg.mixer_scale = 0.0;
    let vit_cfg = cfg.with_variant(Variant::Vit);
    for seed in 0..3 {
        let x = input(&cfg, seed + 7);
        let (a, _) = forward(&ModelParams::init(&cfg, seed).unwrap(), &cfg, &x, false).unwrap();
        let (b, _) = forward(&ModelParams::init(&vit_cfg, seed).unwrap(), &vit_cfg, &x, false).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
    }
}

#[test]
fn all_variants_agree_with_zero_phases() {
    let mut base = toy(Variant::Vit);
    base.phase_init = PhaseInitMode::Zero;
    let x = input(&base, 3);
    let (reference, _) = forward(&ModelParams::init(&base, 5).unwrap(), &base, &x, false).unwrap();
    for v in Variant::ALL {
        let cfg = base.with_variant(v);
        let (l, _) = forward(&ModelParams::init(&cfg, 5).unwrap(), &cfg, &x, false).unwrap();
        assert!(l.max_abs_diff(&reference) < 1e-10, "{v}");
    }
}

#[test]
fn frozen_phases_stay_at_initialization() {
    let cfg = toy(Variant::KopeFrozenPhase);
    let params = ModelParams::init(&cfg, 1).unwrap();
    let (_, trace) = forward(&params, &cfg, &input(&cfg, 2), true).unwrap();
    let trace = trace.unwrap();
    let init = initial_phases(&cfg).unwrap().unwrap();
    for layer in &trace.layers {
        assert_eq!(layer.phases.as_ref().unwrap(), &init);
        assert!(layer.coupling.is_none());
    }
    assert_eq!(trace.final_phases.as_ref().unwrap(), &init);
}

#[test]
fn trace_is_consistent() {
    for v in Variant::ALL {
        let cfg = toy(v);
        let params = ModelParams::init(&cfg, 9).unwrap();
        let (_, trace) = forward(&params, &cfg, &input(&cfg, 4), true).unwrap();
        let trace = trace.unwrap();
        assert_eq!(trace.layers.len(), cfg.depth);
        for layer in &trace.layers {
            assert_eq!(layer.attention.len(), cfg.heads);
            for a in &layer.attention {
                for i in 0..a.rows() {
                    assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
            if let Some(p) = &layer.phases {
                assert!(p.max_norm_error() < 1e-9);
            }
            assert_eq!(layer.phases.is_some(), v.uses_phases());
            assert_eq!(layer.coupling.is_some(), v.steps_phases());
        }
    }
}

#[test]
fn kope_phases_move_under_coupling() {
    let cfg = toy(Variant::Kope);
    let params = ModelParams::init(&cfg, 2).unwrap();
    let (_, trace) = forward(&params, &cfg, &input(&cfg, 6), true).unwrap();
    let trace = trace.unwrap();
    let first = trace.layers[0].phases.as_ref().unwrap();
    let last = trace.final_phases.as_ref().unwrap();
    let moved = first.data().iter().zip(last.data()).any(|(a, b)| (a - b).abs() > 1e-6);
    assert!(moved);
}

fn end_to_end_check(cfg: &ModelConfig, hinge: bool) {
    let mut checked = 0;
    let mut seed = 0;
    while checked < 2 {
        seed += 1;
        let params = ModelParams::init(cfg, seed).unwrap();
        let x = input(cfg, 50 + seed);
        let label = (seed % 2) as usize;
        let f = |tape: &mut Tape, vars: &[Var]| {
            let bound = params.assemble(vars.to_vec());
            let out = forward_tape(tape, &bound, cfg, &x)?;
            if hinge {
                hinge_loss(tape, out.logits, label)
            } else {
                tape.cross_entropy(out.logits, &[label])
            }
        };
        let r = grad_check_multi(f, &params.leaf_values(), &GradCheckOptions::default()).unwrap();
        if r.relu_margin < KINK_MARGIN {
            continue;
        }
        assert!(r.max_rel_error < 1e-5, "seed {seed}: {}", r.max_rel_error);
        checked += 1;
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut cfg = toy(Variant::Kope);
    cfg.mixer_scale = 0.1;
    cfg.kuramoto.gamma = 0.2;
    end_to_end_check(&cfg, false);
    let mut two = cfg.clone();
    two.num_classes = 2;
    end_to_end_check(&two, true);
}

#[test]
fn toy_parameter_counts_match_hand_tally() {
    // embed 4*8+8, cls 8, pos 5*8; per layer: two norms 32, attention
    // 4*(64+8), MLP 8*16+16+16*8+8; final norm 16; head 8*3+3.
    let base = 40 + 8 + 40 + 2 * (32 + 288 + 280) + 16 + 27;
    assert_eq!(base, 1331);
    let vit = count_params(&toy(Variant::Vit));
    assert_eq!((vit.total, vit.kope_overhead), (1331, 0));
    // mixers 2 layers * 2 heads * 2x2, coupling maps 2 * 8x8.
    let kope = count_params(&toy(Variant::Kope));
    assert_eq!((kope.total, kope.kope_overhead), (1331 + 16 + 128, 144));
    let mut learned = toy(Variant::Kope);
    learned.kuramoto.gamma_learnable = true;
    assert_eq!(count_params(&learned).kope_overhead, 145);
    for v in Variant::ALL {
        for cfg in [toy(v), learned.with_variant(v)] {
            let p = ModelParams::init(&cfg, 0).unwrap();
            assert_eq!(count_params(&cfg).total, p.num_params(), "{v}");
        }
    }
}

#[test]
fn toy_flop_counts_match_hand_tally() {
    // t=5, d=8, hidden 16, 4 patches of 4 features, d_h=4, 3 classes.
    let embed = 4.0 * 4.0 * 8.0;
    let layer = 4.0 * 5.0 * 64.0 + 2.0 * 25.0 * 8.0 + 2.0 * 5.0 * 8.0 * 16.0;
    let vit = embed + 2.0 * layer + 24.0;
    assert_eq!(vit, 6072.0);
    let c = count_flops(&toy(Variant::Kope));
    assert_eq!(c.vit_flops, 6072.0);
    // rotations 4*2*t*d, mixer t*d*d_h/2, coupling maps 2*t*d^2,
    // logits and drive t^2*d each, update 3*t*d.
    let extra = 320.0 + 80.0 + 640.0 + 200.0 + 200.0 + 120.0;
    assert_eq!(c.kope_flops, 6072.0 + 2.0 * extra);
    assert_eq!(count_flops(&toy(Variant::Vit)).ratio, 1.0);
}

#[test]
fn vit_base_costs_match_reported_figures() {
    let p = count_params(&ModelConfig::vit_base(Variant::Kope));
    assert_eq!(p.base, 86_567_656);
    assert!((p.base as f64 / 86.6e6 - 1.0).abs() < 0.015);
    assert!((0.01..=0.02).contains(&p.overhead_fraction), "{}", p.overhead_fraction);
    assert!((p.total as f64 / 87.9e6 - 1.0).abs() < 0.01);
    let f = count_flops(&ModelConfig::vit_base(Variant::Kope));
    assert!((f.vit_flops / 17.6e9 - 1.0).abs() < 0.1, "{}", f.vit_flops);
    assert!((1.15..=1.25).contains(&f.ratio), "{}", f.ratio);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for v in Variant::ALL {
        let mut cfg = toy(v);
        cfg.kuramoto.gamma_learnable = true;
        let params = ModelParams::init(&cfg, 31).unwrap();
        let path = dir.path().join(format!("{v}.ckpt"));
        save_checkpoint(&path, &cfg, &params).unwrap();
        let (cfg2, params2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(params2, params);
        let x = input(&cfg, 1);
        let (a, _) = forward(&params, &cfg, &x, false).unwrap();
        let (b, _) = forward(&params2, &cfg2, &x, false).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let cfg = toy(Variant::Kope);
    let params = ModelParams::init(&cfg, 1).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &cfg, &params).unwrap();
    assert!(read_checkpoint(&bytes[..bytes.len() - 8]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(read_checkpoint(&extra[..]).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(read_checkpoint(&magic[..]).is_err());
    // A header whose config disagrees with the payload layout.
    let other = ModelParams::init(&toy(Variant::Vit), 1).unwrap();
    let mut mismatched = Vec::new();
    write_checkpoint(&mut mismatched, &cfg, &other).unwrap();
    assert!(read_checkpoint(&mismatched[..]).is_err());
}
