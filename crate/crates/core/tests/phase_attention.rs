use kope_core::kuramoto::PhaseState;
use kope_core::phase_attention::{
    init_phases, rmhsa, rotate_halfdim, PhaseInitConfig, PhaseMixer, RotaryAttentionParams, RotationPaths,
};
use kope_core::{KopeRng, Tensor};
use proptest::prelude::*;

fn random_tokens(l: usize, d: usize, rng: &mut KopeRng) -> Tensor {
    Tensor::new(vec![l, d], rng.normal_vec(l * d, 1.0)).unwrap()
}

fn random_params(d: usize, heads: usize, rng: &mut KopeRng) -> RotaryAttentionParams {
    let mut p = RotaryAttentionParams::init(d, heads, rng).unwrap();
    for b in [&mut p.b_q, &mut p.b_k, &mut p.b_v, &mut p.b_o] {
        *b = Tensor::new(vec![d], rng.normal_vec(d, 0.1)).unwrap();
    }
    p
}

fn random_phases(l: usize, heads: usize, pairs: usize, rng: &mut KopeRng) -> PhaseState {
    let angles = rng.uniform_vec(l * heads * pairs, -3.2, 3.2);
    PhaseState::from_angles(l, heads, pairs, &angles).unwrap()
}

/// Plain multi-head attention written with explicit loops.
fn reference_mhsa(x: &Tensor, p: &RotaryAttentionParams) -> Vec<Vec<f64>> {
    let (l, d) = (x.rows(), x.cols());
    let dh = d / p.heads;
    let proj = |w: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
        (0..l)
            .map(|i| {
                (0..d)
                    .map(|o| b.data()[o] + (0..d).map(|k| x.at(i, k) * w.at(k, o)).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let (q, k, v) = (proj(&p.w_q, &p.b_q), proj(&p.w_k, &p.b_k), proj(&p.w_v, &p.b_v));
    let mut cat = vec![vec![0.0; d]; l];
    for h in 0..p.heads {
        let cols = h * dh..(h + 1) * dh;
        for m in 0..l {
            let s: Vec<f64> = (0..l)
                .map(|n| cols.clone().map(|c| q[m][c] * k[n][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                cat[m][c] = (0..l).map(|n| e[n] / z * v[n][c]).sum();
            }
        }
    }
    (0..l)
        .map(|i| {
            (0..d)
                .map(|o| p.b_o.data()[o] + (0..d).map(|k| cat[i][k] * p.w_o.at(k, o)).sum::<f64>())
                .collect()
        })
        .collect()
}

#[test]
fn zero_phases_reduce_to_plain_attention() {
    let mut rng = KopeRng::new(21);
    for (l, d, heads) in [(5, 8, 2), (7, 12, 3), (3, 4, 1)] {
        let x = random_tokens(l, d, &mut rng);
        let p = random_params(d, heads, &mut rng);
        let zero = PhaseState::synchronized(l, heads, d / heads / 2, 0.0);
        let mixer = PhaseMixer::identity(heads, d / heads / 2);
        let out = rmhsa(&x, &zero, &p, Some(&mixer), RotationPaths::ALL).unwrap();
        let reference = reference_mhsa(&x, &p);
        for i in 0..l {
            for j in 0..d {
                assert!((out.output.at(i, j) - reference[i][j]).abs() < 1e-10);
            }
        }
    }
}

#[derive(Clone, Copy)]
struct C(f64, f64);

impl C {
    fn mul(self, o: C) -> C {
        C(self.0 * o.0 - self.1 * o.1, self.0 * o.1 + self.1 * o.0)
    }
    fn conj(self) -> C {
        C(self.0, -self.1)
    }
    fn expi(t: f64) -> C {
        C(t.cos(), t.sin())
    }
}

#[test]
fn scores_follow_complex_phase_difference() {
    let mut rng = KopeRng::new(4);
    for _ in 0..20 {
        let mut p = random_params(2, 1, &mut rng);
        for b in [&mut p.b_q, &mut p.b_k] {
            *b = Tensor::zeros(&[2]);
        }
        let x = random_tokens(2, 2, &mut rng);
        let phi = rng.uniform_vec(2, -3.0, 3.0);
        let state = PhaseState::from_angles(2, 1, 1, &phi).unwrap();
        let out = rmhsa(&x, &state, &p, None, RotationPaths::ALL).unwrap();
        let as_complex = |w: &Tensor, i: usize| {
            let v: Vec<f64> = (0..2).map(|o| (0..2).map(|k| x.at(i, k) * w.at(k, o)).sum()).collect();
            C(v[0], v[1])
        };
        for m in 0..2 {
            for n in 0..2 {
                let q = as_complex(&p.w_q, m);
                let k = as_complex(&p.w_k, n);
                let expected = q.mul(k.conj()).mul(C::expi(phi[m] - phi[n])).0;
                assert!((out.scores[0].at(m, n) - expected).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn global_phase_shift_leaves_output_unchanged() {
    let mut rng = KopeRng::new(8);
    let (l, d, heads) = (6, 8, 2);
    let x = random_tokens(l, d, &mut rng);
    let p = random_params(d, heads, &mut rng);
    let s = random_phases(l, heads, 2, &mut rng);
    let base = rmhsa(&x, &s, &p, None, RotationPaths::ALL).unwrap();
    for c in [0.3, -2.0, 5.0] {
        let shifted = rmhsa(&x, &s.shifted(c), &p, None, RotationPaths::ALL).unwrap();
        assert!(shifted.output.max_abs_diff(&base.output) < 1e-10);
    }
}

#[test]
fn attention_rows_are_distributions() {
    let mut rng = KopeRng::new(9);
    let x = random_tokens(5, 8, &mut rng);
    let p = random_params(8, 2, &mut rng);
    let s = random_phases(5, 2, 2, &mut rng);
    let out = rmhsa(&x, &s, &p, None, RotationPaths::QK_ONLY).unwrap();
    for a in &out.attention {
        for i in 0..5 {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(a.row(i).iter().all(|v| *v >= 0.0));
        }
    }
}

#[test]
fn near_identity_mixer_stays_close_to_unmixed() {
    let mut rng = KopeRng::new(10);
    for _ in 0..10 {
        let x = random_tokens(9, 16, &mut rng);
        let p = random_params(16, 2, &mut rng);
        let s = init_phases(&PhaseInitConfig { base: 100.0, grid: (2, 4) }, 2, 8).unwrap();
        let m = PhaseMixer::near_identity(2, 4, 1e-3, &mut rng);
        let mixed = rmhsa(&x, &s, &p, Some(&m), RotationPaths::ALL).unwrap();
        let plain = rmhsa(&x, &s, &p, None, RotationPaths::ALL).unwrap();
        let rel = mixed.output.sub(&plain.output).unwrap().norm() / plain.output.norm();
        assert!(rel < 1e-2, "{rel}");
    }
}

proptest! {
    #[test]
    fn rotation_preserves_norm(v in prop::collection::vec(-5.0f64..5.0, 8), a in prop::collection::vec(-7.0f64..7.0, 4)) {
        let phases: Vec<f64> = a.iter().flat_map(|t| [t.cos(), t.sin()]).collect();
        let r = rotate_halfdim(&v, &phases, 1.0).unwrap();
        let n0: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n1: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n0 - n1).abs() < 1e-12 * (1.0 + n0));
    }

    #[test]
    fn rotation_composes_additively(v in prop::collection::vec(-5.0f64..5.0, 2), a in -4.0f64..4.0, b in -4.0f64..4.0) {
        let p = |t: f64| [t.cos(), t.sin()];
        let two = rotate_halfdim(&rotate_halfdim(&v, &p(a), 1.0).unwrap(), &p(b), 1.0).unwrap();
        let one = rotate_halfdim(&v, &p(a + b), 1.0).unwrap();
        prop_assert!((two[0] - one[0]).abs() < 1e-12 && (two[1] - one[1]).abs() < 1e-12);
    }
}
