use kope_core::gradcheck::{check_primitive, primitive_suite, GradCheckOptions};
use kope_core::tensor::layernorm;
use kope_core::{DType, Exec, KopeRng, Primitive, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::new(vec![rows, cols], KopeRng::new(seed).uniform_vec(rows * cols, -3.0, 3.0)).unwrap()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, temp in 0.1f64..5.0) {
        let s = matrix(rows, cols, seed).softmax_rows(temp).unwrap();
        for r in 0..rows {
            prop_assert!(s.row(r).iter().all(|v| *v >= 0.0));
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_commutes_with_permutation(seed in any::<u64>(), cols in 2usize..9) {
        let x = matrix(1, cols, seed);
        let mut perm: Vec<usize> = (0..cols).collect();
        KopeRng::new(seed ^ 1).shuffle(&mut perm);
        let px = Tensor::new(vec![1, cols], perm.iter().map(|&i| x.data()[i]).collect()).unwrap();
        let a = px.softmax_rows(1.0).unwrap();
        let b = x.softmax_rows(1.0).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((a.data()[k] - b.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn layernorm_standardizes_rows(seed in any::<u64>(), cols in 2usize..12) {
        let x = matrix(3, cols, seed);
        let (y, _) = layernorm(&x, &Tensor::filled(&[cols], 1.0), &Tensor::zeros(&[cols]), 1e-12).unwrap();
        for r in 0..3 {
            let raw = x.row(r);
            let m = raw.iter().sum::<f64>() / cols as f64;
            let v = raw.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / cols as f64;
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - v / (v + 1e-12)).abs() < 1e-10);
        }
    }
}

#[test]
fn suite_is_the_same_sequential_and_parallel() {
    let opts = GradCheckOptions::default();
    let seq = primitive_suite(10, 5, &opts, Exec::Sequential).unwrap();
    let par = primitive_suite(10, 5, &opts, Exec::Parallel).unwrap();
    assert_eq!(seq.len(), Primitive::ALL.len());
    for (a, b) in seq.iter().zip(&par) {
        assert_eq!(a.primitive, b.primitive);
        assert_eq!(a.max_rel_error, b.max_rel_error);
        assert!(a.passed, "{a:?}");
    }
}

#[test]
fn relu_points_near_the_kink_are_rejected() {
    let r = check_primitive(Primitive::Relu, 100, 9, &GradCheckOptions::default()).unwrap();
    assert!(r.passed);
    assert_eq!(r.points, 100);
}

#[test]
fn single_precision_passes_its_looser_budget() {
    let opts = GradCheckOptions::for_dtype(DType::Single);
    for p in [Primitive::MatMul, Primitive::Softmax, Primitive::Rotate, Primitive::Project] {
        let r = check_primitive(p, 20, 2, &opts).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
