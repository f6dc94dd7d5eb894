use std::f64::consts::PI;

use kope_core::kuramoto::{
    energy, evolve, kuramoto_step, normalize_pairs, order_parameter, project_orthogonal, step_batch, CouplingAxis,
    CouplingMatrix, KuramotoConfig, PhaseState,
};
use kope_core::{Exec, KopeRng};
use proptest::prelude::*;

fn random_state(rng: &mut KopeRng, tokens: usize, heads: usize, pairs: usize) -> PhaseState {
    let angles = rng.uniform_vec(tokens * heads * pairs, -PI, PI);
    PhaseState::from_angles(tokens, heads, pairs, &angles).unwrap()
}

/// Random row-stochastic coupling with positive entries.
fn random_coupling(rng: &mut KopeRng, heads: usize, tokens: usize) -> CouplingMatrix {
    let mut w = Vec::new();
    for _ in 0..heads * tokens {
        let row = rng.uniform_vec(tokens, 0.05, 1.0);
        let s: f64 = row.iter().sum();
        w.extend(row.into_iter().map(|x| x / s));
    }
    CouplingMatrix::new(heads, tokens, CouplingAxis::Senders, w).unwrap()
}

/// Symmetric and row-stochastic: `(A + A^T) / 2` scaled by its largest row
/// sum, with the remainder of each row on the diagonal.
fn symmetric_coupling(rng: &mut KopeRng, heads: usize, tokens: usize) -> CouplingMatrix {
    let mut w = Vec::new();
    for _ in 0..heads {
        let a = rng.uniform_vec(tokens * tokens, 0.0, 1.0);
        let mut s = vec![0.0; tokens * tokens];
        for i in 0..tokens {
            for j in 0..tokens {
                s[i * tokens + j] = 0.5 * (a[i * tokens + j] + a[j * tokens + i]);
            }
        }
        let c = (0..tokens)
            .map(|i| s[i * tokens..(i + 1) * tokens].iter().sum::<f64>())
            .fold(0.0, f64::max);
        for v in &mut s {
            *v /= c;
        }
        for i in 0..tokens {
            let r: f64 = s[i * tokens..(i + 1) * tokens].iter().sum();
            s[i * tokens + i] += 1.0 - r;
        }
        w.extend(s);
    }
    CouplingMatrix::new(heads, tokens, CouplingAxis::Senders, w).unwrap()
}

fn gamma(g: f64) -> KuramotoConfig {
    KuramotoConfig {
        gamma: g,
        ..KuramotoConfig::default()
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn step_keeps_unit_pairs(seed in any::<u64>(), gi in 0usize..4) {
        let g = [0.01, 0.05, 0.5, 1.0][gi];
        let mut rng = KopeRng::new(seed);
        let st = random_state(&mut rng, 6, 2, 3);
        let j = random_coupling(&mut rng, 2, 6);
        let next = kuramoto_step(&st, &j, &gamma(g)).unwrap();
        prop_assert!(next.max_norm_error() < 1e-9);
    }

    #[test]
    fn projection_is_orthogonal(seed in any::<u64>()) {
        let mut rng = KopeRng::new(seed);
        let st = random_state(&mut rng, 5, 2, 2);
        let drive = rng.uniform_vec(st.data().len(), -3.0, 3.0);
        let out = project_orthogonal(&st, &drive).unwrap();
        for (o, r) in out.chunks(2).zip(st.data().chunks(2)) {
            prop_assert!((o[0] * r[0] + o[1] * r[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn normalization_gives_unit_pairs(raw in prop::collection::vec(0.1f64..5.0, 8), signs in prop::collection::vec(any::<bool>(), 8)) {
        let v: Vec<f64> = raw.iter().zip(&signs).map(|(x, s)| if *s { *x } else { -x }).collect();
        let st = normalize_pairs(2, 1, 2, &v).unwrap();
        prop_assert!(st.max_norm_error() < 1e-12);
    }

    #[test]
    fn global_shift_commutes_with_step(seed in any::<u64>(), c in -PI..PI) {
        let mut rng = KopeRng::new(seed);
        let st = random_state(&mut rng, 6, 2, 2);
        let j = random_coupling(&mut rng, 2, 6);
        let cfg = gamma(0.3);
        let a = kuramoto_step(&st.shifted(c), &j, &cfg).unwrap();
        let b = kuramoto_step(&st, &j, &cfg).unwrap().shifted(c);
        prop_assert!(max_diff(a.data(), b.data()) < 1e-9);
    }

    #[test]
    fn synchronized_state_is_a_fixed_point(seed in any::<u64>(), angle in -PI..PI) {
        let mut rng = KopeRng::new(seed);
        let st = PhaseState::synchronized(5, 2, 2, angle);
        let j = random_coupling(&mut rng, 2, 5);
        let next = kuramoto_step(&st, &j, &gamma(0.5)).unwrap();
        prop_assert!(max_diff(next.data(), st.data()) < 1e-12);
    }
}

#[test]
fn energy_descends_under_symmetric_coupling() {
    for seed in 0..50 {
        let mut rng = KopeRng::new(seed);
        let mut st = random_state(&mut rng, 8, 2, 2);
        let j = symmetric_coupling(&mut rng, 2, 8);
        assert!(j.is_symmetric(1e-15));
        let cfg = gamma(0.05);
        let mut e = energy(&st, &j).unwrap();
        for t in 0..100 {
            st = kuramoto_step(&st, &j, &cfg).unwrap();
            let next = energy(&st, &j).unwrap();
            assert!(next <= e + 1e-9, "seed {seed} step {t}: {e} -> {next}");
            e = next;
        }
    }
}

#[test]
fn block_coupling_synchronizes_within_blocks() {
    let n = 8;
    let half = n / 2;
    for seed in 0..20 {
        let mut rng = KopeRng::new(seed);
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let same = (i < half) == (j < half);
                w[i * n + j] = if same { 0.99 / half as f64 } else { 0.01 / half as f64 };
            }
        }
        let j = CouplingMatrix::new(1, n, CouplingAxis::Senders, w).unwrap();
        let a = rng.uniform_range(-PI, PI);
        let b = a + rng.uniform_range(1.0, PI);
        let angles: Vec<f64> = (0..n)
            .map(|i| if i < half { a } else { b } + rng.uniform_range(-0.5, 0.5))
            .collect();
        let st = PhaseState::from_angles(n, 1, 1, &angles).unwrap();
        let end = evolve(&st, &j, &gamma(0.05), 500).unwrap();
        let mut w_a = vec![0.0; n];
        let mut w_b = vec![0.0; n];
        for i in 0..half {
            w_a[i] = 1.0 / half as f64;
            w_b[i + half] = 1.0 / half as f64;
        }
        assert!(order_parameter(&end, Some(&w_a)).unwrap() > 0.99, "seed {seed}");
        assert!(order_parameter(&end, Some(&w_b)).unwrap() > 0.99, "seed {seed}");
        let mean = |idx: std::ops::Range<usize>| {
            let (c, s) = idx.fold((0.0, 0.0), |(c, s), i| {
                let (x, y) = end.pair(i, 0, 0);
                (c + x, s + y)
            });
            s.atan2(c)
        };
        let d = (mean(0..half) - mean(half..n)).rem_euclid(2.0 * PI);
        assert!(d.min(2.0 * PI - d) > 0.1, "seed {seed}: blocks merged");
    }
}

/// Classical RK4 on `dtheta_i/dt = sum_j J_ij sin(theta_j - theta_i)`.
fn integrate_scalar(theta: &[f64], j: &[Vec<f64>], t_end: f64, h: f64) -> Vec<f64> {
    let f = |th: &[f64]| -> Vec<f64> {
        (0..th.len())
            .map(|i| (0..th.len()).map(|k| j[i][k] * (th[k] - th[i]).sin()).sum())
            .collect()
    };
    let mut th = theta.to_vec();
    let steps = (t_end / h).round() as usize;
    for _ in 0..steps {
        let k1 = f(&th);
        let k2 = f(&th.iter().zip(&k1).map(|(x, k)| x + 0.5 * h * k).collect::<Vec<_>>());
        let k3 = f(&th.iter().zip(&k2).map(|(x, k)| x + 0.5 * h * k).collect::<Vec<_>>());
        let k4 = f(&th.iter().zip(&k3).map(|(x, k)| x + h * k).collect::<Vec<_>>());
        for i in 0..th.len() {
            th[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    th
}

fn scalar_order(th: &[f64]) -> f64 {
    let n = th.len() as f64;
    let c: f64 = th.iter().map(|t| t.cos()).sum::<f64>() / n;
    let s: f64 = th.iter().map(|t| t.sin()).sum::<f64>() / n;
    c.hypot(s)
}

#[test]
fn discrete_steps_track_the_scalar_ode() {
    let g = 0.05;
    let steps = 200;

    let splay = [0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0];
    let uni3 = vec![vec![1.0 / 3.0; 3]; 3];
    let st = PhaseState::from_angles(3, 1, 1, &splay).unwrap();
    let end = evolve(&st, &CouplingMatrix::uniform(1, 3), &gamma(g), steps).unwrap();
    let ode = integrate_scalar(&splay, &uni3, g * steps as f64, 1e-4);
    assert!(order_parameter(&end, None).unwrap() < 0.05);
    assert!(scalar_order(&ode) < 0.05);

    let two = [0.0, 1.0];
    let uni2 = vec![vec![0.5; 2]; 2];
    let st = PhaseState::from_angles(2, 1, 1, &two).unwrap();
    let j = CouplingMatrix::uniform(1, 2);
    let end = evolve(&st, &j, &gamma(g), steps).unwrap();
    let ode = integrate_scalar(&two, &uni2, g * steps as f64, 1e-4);
    assert!(order_parameter(&end, None).unwrap() > 0.999);
    assert!(scalar_order(&ode) > 0.999);

    // Early in the trajectory the phase gap follows the ODE to first order in gamma.
    let early = evolve(&st, &j, &gamma(g), 20).unwrap();
    let gap = early.angle(1, 0, 0) - early.angle(0, 0, 0);
    let ode = integrate_scalar(&two, &uni2, g * 20.0, 1e-4);
    assert!((gap - (ode[1] - ode[0])).abs() < 0.02, "{gap} vs {}", ode[1] - ode[0]);
}

#[test]
fn batched_stepping_matches_sequential() {
    let mut rng = KopeRng::new(31);
    let states: Vec<PhaseState> = (0..6).map(|_| random_state(&mut rng, 5, 2, 2)).collect();
    let couplings: Vec<CouplingMatrix> = (0..6).map(|_| random_coupling(&mut rng, 2, 5)).collect();
    let cfg = gamma(0.2);
    let seq = step_batch(&states, &couplings, &cfg, Exec::Sequential).unwrap();
    let par = step_batch(&states, &couplings, &cfg, Exec::Parallel).unwrap();
    assert_eq!(seq, par);
    for (i, s) in seq.iter().enumerate() {
        assert_eq!(s, &kuramoto_step(&states[i], &couplings[i], &cfg).unwrap());
    }
}
