use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use vll::kernels::{GramKernel, Provenance};
use vll::regression::{fit, gen_error, predict, r_squared, solve_duals, spectral_ridge};
use vll::VllError;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut r = vll::rng::rng(seed);
    DMatrix::from_fn(rows, cols, |_, _| rand::Rng::random_range(&mut r, -1.0..1.0))
}

fn random_vector(n: usize, seed: u64) -> DVector<f64> {
    random_matrix(n, 1, seed).column(0).into_owned()
}

fn gram(m: DMatrix<f64>) -> GramKernel {
    GramKernel::new(m, Provenance::Entk0).unwrap()
}

/// (K + λI)⁻¹y by Gauss-Jordan elimination with partial pivoting.
fn dense_solve(k: &DMatrix<f64>, ridge: f64, y: &DVector<f64>) -> DVector<f64> {
    let n = y.len();
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| k[(i, j)] + if i == j { ridge } else { 0.0 }).collect();
            row.push(y[i]);
            row
        })
        .collect();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        let p = a[c][c];
        for v in a[c].iter_mut() {
            *v /= p;
        }
        let pivot_row = a[c].clone();
        for (i, row) in a.iter_mut().enumerate() {
            if i != c {
                let f = row[c];
                row.iter_mut().zip(&pivot_row).for_each(|(v, pv)| *v -= f * pv);
            }
        }
    }
    DVector::from_iterator(n, a.iter().map(|r| r[n]))
}

fn train_mse(k: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> f64 {
    let duals = solve_duals(k, y, ridge).unwrap();
    gen_error(&(k * duals), y).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn ridgeless_fit_interpolates(p in 1usize..30, seed in any::<u64>()) {
        // Full rank: P points in P + 5 feature dimensions.
        let x = random_matrix(p, p + 5, seed);
        let k = &x * x.transpose();
        let y = random_vector(p, seed ^ 1);
        let f = fit(&gram(k.clone()), &y, 0.0).unwrap();
        let pred = predict(&f, &k).unwrap();
        prop_assert!((&pred - &y).norm() <= 1e-8 * y.norm());
    }

    #[test]
    fn duals_match_dense_inverse(p in 1usize..31, rank_extra in 1usize..10, ridge in 1e-4f64..10.0, seed in any::<u64>()) {
        let x = random_matrix(p, p + rank_extra, seed);
        let k = &x * x.transpose();
        let y = random_vector(p, seed ^ 2);
        let got = solve_duals(&k, &y, ridge).unwrap();
        let want = dense_solve(&k, ridge, &y);
        prop_assert!((&got - &want).norm() <= 1e-9 * want.norm());
    }

    #[test]
    fn small_ridge_matches_dense_inverse(p in 1usize..25, seed in any::<u64>()) {
        let x = random_matrix(p, 4, seed);
        let k = &x * x.transpose();
        let y = random_vector(p, seed ^ 3);
        let got = solve_duals(&k, &y, 1e-3).unwrap();
        let want = dense_solve(&k, 1e-3, &y);
        prop_assert!((&got - &want).norm() <= 1e-10 * want.norm());
        let spec = spectral_ridge(&k, &y, 1e-3);
        prop_assert!((&got - &spec).norm() <= 1e-9 * want.norm());
    }

    #[test]
    fn factorized_and_spectral_paths_agree(p in 2usize..30, ridge in 1e-6f64..1.0, seed in any::<u64>()) {
        let x = random_matrix(p, p, seed);
        let k = &x * x.transpose();
        let y = random_vector(p, seed ^ 9);
        let a = solve_duals(&k, &y, ridge).unwrap();
        let b = spectral_ridge(&k, &y, ridge);
        prop_assert!((&a - &b).norm() <= 1e-6 * b.norm());
    }
}

#[test]
fn train_error_grows_with_ridge() {
    let ridges: Vec<f64> = (0..=24).map(|i| 10f64.powf(-4.0 + i as f64 * 0.25)).collect();
    for inst in 0..10u64 {
        let x = random_matrix(20, 8, 100 + inst);
        let k = &x * x.transpose();
        let y = random_vector(20, 200 + inst);
        let errs: Vec<f64> = ridges.iter().map(|&l| train_mse(&k, &y, l)).collect();
        for w in errs.windows(2) {
            assert!(w[1] >= w[0] * (1.0 - 1e-12), "instance {inst}: {errs:?}");
        }
    }
}

#[test]
fn scalar_kernel_dual() {
    let f = fit(&gram(DMatrix::from_element(1, 1, 4.0)), &DVector::from_element(1, 3.0), 0.0).unwrap();
    assert!((f.dual_coefficients[0] - 0.75).abs() < 1e-15);
}

#[test]
fn huge_ridge_shrinks_to_zero() {
    let x = random_matrix(6, 3, 1);
    let k = &x * x.transpose();
    let y = random_vector(6, 2);
    let d = solve_duals(&k, &y, 1e12).unwrap();
    assert!((&d - &y / 1e12).norm() <= 1e-20);
    assert!((&k * d).amax() < 1e-10);
}

#[test]
fn zero_cross_kernel_predicts_zero() {
    let x = random_matrix(5, 5, 3);
    let f = fit(&gram(&x * x.transpose()), &random_vector(5, 4), 1e-6).unwrap();
    let pred = predict(&f, &DMatrix::zeros(3, 5)).unwrap();
    assert!(pred.iter().all(|v| *v == 0.0));
    assert!(matches!(predict(&f, &DMatrix::zeros(3, 4)), Err(VllError::Shape(_))));
}

#[test]
fn linear_kernel_recovers_a_linear_target() {
    let (p, d) = (40, 6);
    let x = random_matrix(p, d, 5);
    let beta = random_vector(d, 6);
    let y = &x * &beta;
    let xt = random_matrix(100, d, 7);
    let yt = &xt * &beta;
    let f = fit(&gram(&x * x.transpose()), &y, 0.0).unwrap();
    let pred = predict(&f, &(&xt * x.transpose())).unwrap();
    assert!(gen_error(&pred, &yt).unwrap() <= 1e-10);
}

#[test]
fn gen_error_arithmetic() {
    let p = DVector::from_row_slice(&[0.0, 2.0]);
    let t = DVector::from_row_slice(&[1.0, 1.0]);
    assert_eq!(gen_error(&p, &t).unwrap(), 1.0);
    assert_eq!(gen_error(&t, &t).unwrap(), 0.0);
    assert!(gen_error(&DVector::zeros(0), &DVector::zeros(0)).is_err());
    assert!(r_squared(&p, &DVector::from_element(2, 1.0)).is_err());
}

#[test]
fn nonfinite_and_degenerate_inputs_are_rejected() {
    let mut k = DMatrix::identity(3, 3);
    k[(0, 1)] = f64::NAN;
    assert!(matches!(solve_duals(&k, &DVector::zeros(3), 0.1), Err(VllError::NonFinite(_))));
    assert!(matches!(solve_duals(&DMatrix::zeros(3, 3), &DVector::from_element(3, 1.0), 0.0), Err(VllError::DegenerateKernel)));
    assert!(solve_duals(&DMatrix::identity(2, 2), &DVector::zeros(2), -1.0).is_err());
}
