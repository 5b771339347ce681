mod common;

use common::{matmul_loops, random_matrix, random_spd, rng};
use enkf_lab::model::{apply_model, validate_model, GaussianState, LinearModel, StepSpec};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn model_from(a: DMatrix<f64>, b: DVector<f64>, r: DMatrix<f64>) -> LinearModel {
    let m = a.nrows();
    let d = r.nrows();
    LinearModel::new(
        m,
        d,
        GaussianState::new(DVector::zeros(m), DMatrix::identity(m, m)),
        vec![StepSpec {
            a,
            b,
            h: DMatrix::from_fn(d, m, |i, j| if i == j { 1.0 } else { 0.0 }),
            r,
            data: DVector::zeros(d),
        }],
    )
}

#[test]
fn apply_matches_loop_oracle() {
    let mut g = rng(1);
    let a = random_matrix(&mut g, 3, 3);
    let b = DVector::from_fn(3, |_, _| g.random_range(-1.0..1.0));
    let x = random_matrix(&mut g, 3, 5);
    let model = model_from(a.clone(), b.clone(), DMatrix::identity(2, 2));
    let out = apply_model(&model, 1, &x).unwrap();
    let mut expected = matmul_loops(&a, &x);
    for j in 0..5 {
        for i in 0..3 {
            expected[(i, j)] += b[i];
        }
    }
    assert!((out - expected).abs().max() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn apply_is_affine(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let mut g = rng(seed);
        let model = model_from(random_matrix(&mut g, 3, 3), DVector::from_fn(3, |_, _| g.random_range(-2.0..2.0)), DMatrix::identity(2, 2));
        let x = random_matrix(&mut g, 3, 6);
        let y = random_matrix(&mut g, 3, 6);
        let mixed = apply_model(&model, 1, &(&x * alpha + &y * (1.0 - alpha))).unwrap();
        let separate = apply_model(&model, 1, &x).unwrap() * alpha + apply_model(&model, 1, &y).unwrap() * (1.0 - alpha);
        prop_assert!((mixed - separate).abs().max() < 1e-12);
    }

    #[test]
    fn apply_commutes_with_permutation(seed in any::<u64>(), perm in Just((0..7).collect::<Vec<usize>>()).prop_shuffle()) {
        let mut g = rng(seed);
        let model = model_from(random_matrix(&mut g, 4, 4), DVector::from_fn(4, |_, _| g.random_range(-2.0..2.0)), DMatrix::identity(2, 2));
        let x = random_matrix(&mut g, 4, 7);
        let permute = |m: &DMatrix<f64>| DMatrix::from_columns(&perm.iter().map(|&p| m.column(p)).collect::<Vec<_>>());
        let lhs = apply_model(&model, 1, &permute(&x)).unwrap();
        let rhs = permute(&apply_model(&model, 1, &x).unwrap());
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn factor_built_r_always_accepted(seed in any::<u64>(), d in 1usize..6) {
        let mut g = rng(seed);
        let r = random_spd(&mut g, d, 1e-8);
        let model = model_from(DMatrix::identity(d, d), DVector::zeros(d), r);
        prop_assert!(validate_model(&model).is_ok());
    }
}
