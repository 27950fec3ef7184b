use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use vll::kernels::{
    alignment, alignment_frobenius, cka, entk, entk_opts, mercer_features, ntk_infinite_relu, EntkOptions, FixedBasis, Provenance,
    GramKernel,
};
use vll::nn::{init_mlp, AlphaMode};
use vll::taskgen::sample_sphere;
use vll::VllError;

fn gram(m: DMatrix<f64>) -> GramKernel {
    GramKernel::new(m, Provenance::NtkInf).unwrap()
}

fn random_psd(n: usize, rank: usize, seed: u64) -> DMatrix<f64> {
    let mut r = vll::rng::rng(seed);
    let a = DMatrix::from_fn(n, rank, |_, _| rand::Rng::random_range(&mut r, -1.0..1.0));
    &a * a.transpose()
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    let (vals, _) = vll::linalg::sym_eigen_desc(m);
    *vals.last().unwrap()
}

/// Dense reference: yᵀKy / (Tr K · yᵀy) by explicit sums.
fn alignment_oracle(k: &DMatrix<f64>, y: &[f64]) -> f64 {
    let n = y.len();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            q += y[i] * k[(i, j)] * y[j];
        }
    }
    let tr: f64 = (0..n).map(|i| k[(i, i)]).sum();
    q / (tr * y.iter().map(|v| v * v).sum::<f64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn entk_is_symmetric_psd(
        d in 2usize..8, depth in 2usize..5, width in 1usize..24, n in 1usize..12,
        alpha in 0.5f64..20.0, wr in any::<bool>(), seed in any::<u64>(),
    ) {
        let mode = if wr { AlphaMode::WeightRescale } else { AlphaMode::OutputRescale };
        let s = init_mlp(d, depth, width, alpha, mode, seed).unwrap();
        let x = sample_sphere(n, d, seed ^ 7).unwrap();
        let k = entk(&s, &x, &x).unwrap();
        let scale = k.matrix.amax().max(1e-300);
        prop_assert!((&k.matrix - k.matrix.transpose()).amax() <= 1e-12 * scale);
        prop_assert!(min_eig(&k.matrix) >= -1e-10 * scale);
        let (ntk, _) = ntk_infinite_relu(&x, &x, depth, s.sigma).unwrap();
        prop_assert!(min_eig(&ntk) >= -1e-10 * ntk.amax());
    }

    #[test]
    fn block_size_does_not_change_the_kernel(block in 1usize..9, seed in any::<u64>()) {
        let s = init_mlp(4, 3, 10, 2.0, AlphaMode::WeightRescale, seed).unwrap();
        let x1 = sample_sphere(7, 4, seed ^ 1).unwrap();
        let x2 = sample_sphere(5, 4, seed ^ 2).unwrap();
        let a = entk_opts(&s, &x1, &x2, EntkOptions { block_rows: block, ..Default::default() }).unwrap();
        let b = entk(&s, &x1, &x2).unwrap();
        prop_assert!((&a.matrix - &b.matrix).amax() <= 1e-12 * b.matrix.amax());
    }

    #[test]
    fn alignment_is_bounded_and_matches_dense(n in 2usize..15, rank in 1usize..6, seed in any::<u64>()) {
        let k = random_psd(n, rank, seed);
        let mut r = vll::rng::rng(seed ^ 5);
        let y: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
        let a = alignment(&gram(k.clone()), &y).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&a));
        prop_assert!((a - alignment_oracle(&k, &y)).abs() <= 1e-12);
        let af = alignment_frobenius(&gram(k), &y).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&af));
    }

    #[test]
    fn cka_bounds_and_invariances(n in 3usize..12, seed in any::<u64>(), c in 0.01f64..100.0) {
        let k1 = random_psd(n, 3, seed);
        let k2 = random_psd(n, 4, seed ^ 11);
        let v = cka(&gram(k1.clone()), &gram(k2.clone())).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
        prop_assert!((cka(&gram(k1.clone()), &gram(k1.clone())).unwrap() - 1.0).abs() <= 1e-12);
        let scaled = cka(&gram(&k1 * c), &gram(k2)).unwrap();
        prop_assert!((scaled - v).abs() <= 1e-12);
    }

    #[test]
    fn mercer_features_reconstruct_the_kernel(n in 2usize..20, rank in 1usize..20, seed in any::<u64>()) {
        let k = random_psd(n, rank, seed);
        let grid = sample_sphere(n, 3, seed ^ 3).unwrap();
        let basis = FixedBasis::ntk_reference(&grid, 2, 1.0).unwrap();
        let fm = mercer_features(&gram(k.clone()), &basis, 1e-14).unwrap();
        prop_assert!(fm.rank() <= rank.min(n));
        let rec = fm.gram().matrix;
        prop_assert!((&rec - &k).amax() <= 1e-6 * k.amax().max(1e-12));
    }
}

#[test]
fn target_outer_product_is_perfectly_aligned() {
    let y = [0.3, -1.2, 0.7, 2.0];
    let v = DVector::from_row_slice(&y);
    let k = gram(&v * v.transpose());
    assert!((alignment(&k, &y).unwrap() - 1.0).abs() < 1e-14);
    assert!((alignment_frobenius(&k, &y).unwrap() - 1.0).abs() < 1e-14);
    let id = gram(DMatrix::identity(4, 4));
    assert!((alignment(&id, &y).unwrap() - 0.25).abs() < 1e-15);
}

#[test]
fn degenerate_alignment_is_an_error() {
    let k = gram(DMatrix::zeros(3, 3));
    assert!(matches!(alignment(&k, &[1.0, 0.0, 0.0]), Err(VllError::UndefinedAlignment(_))));
    let id = gram(DMatrix::identity(3, 3));
    assert!(alignment(&id, &[0.0; 3]).is_err());
}

#[test]
fn wide_entk_matches_infinite_width() {
    let x = sample_sphere(8, 10, 3).unwrap();
    for depth in [2usize, 3] {
        let s = init_mlp(10, depth, 4096, 1.0, AlphaMode::WeightRescale, 40 + depth as u64).unwrap();
        let k = entk(&s, &x, &x).unwrap().matrix;
        let (ntk, _) = ntk_infinite_relu(&x, &x, depth, 1.0).unwrap();
        let rel = (&k - &ntk).norm() / ntk.norm();
        assert!(rel < 0.05, "L={depth}: relative Frobenius deviation {rel}");
    }
}

/// ln of the variance over 50 initializations, per width, of the entries picked by `entries`.
fn log_entry_variance(widths: &[usize], master: u64, entries: fn(&DMatrix<f64>) -> Vec<f64>) -> Vec<f64> {
    let x = sample_sphere(2, 10, 5).unwrap();
    widths
        .iter()
        .map(|&n| {
            let draws: Vec<Vec<f64>> = (0..50u64)
                .map(|s| {
                    let seed = vll::rng::derive_seed(master, "offdiag", &[n as u64, s]);
                    let st = init_mlp(10, 3, n, 1.0, AlphaMode::WeightRescale, seed).unwrap();
                    entries(&entk(&st, &x, &x).unwrap().matrix)
                })
                .collect();
            let per_entry = draws[0].len();
            let var: f64 = (0..per_entry)
                .map(|e| {
                    let m = draws.iter().map(|d| d[e]).sum::<f64>() / 50.0;
                    draws.iter().map(|d| (d[e] - m).powi(2)).sum::<f64>() / 49.0
                })
                .sum::<f64>()
                / per_entry as f64;
            var.ln()
        })
        .collect()
}

const WIDTHS: [usize; 4] = [64, 128, 256, 512];

fn width_slope(logs: &[f64]) -> f64 {
    let lw: Vec<f64> = WIDTHS.iter().map(|w| (*w as f64).ln()).collect();
    vll::linalg::ols_slope(&lw, logs)
}

#[test]
#[ignore = "a single entry over 50 seeds has slope sd ~0.16; this seed lands at -1.23"]
fn single_off_diagonal_variance_shrinks_as_inverse_width() {
    let slope = width_slope(&log_entry_variance(&WIDTHS, 11, |k| vec![k[(0, 1)]]));
    assert!((slope + 1.0).abs() <= 0.2, "slope {slope}");
}

#[test]
fn entry_variance_shrinks_as_inverse_width() {
    let slope = width_slope(&log_entry_variance(&WIDTHS, 11, |k| k.iter().copied().collect()));
    assert!((-1.2..=-0.8).contains(&slope), "slope {slope}");
}

#[test]
fn rank_one_kernel_has_one_feature() {
    let v = DVector::from_row_slice(&[1.0, 2.0, -1.0, 0.5]);
    let k = gram(&v * v.transpose());
    let grid = sample_sphere(4, 3, 0).unwrap();
    let basis = FixedBasis::ntk_reference(&grid, 2, 1.0).unwrap();
    let fm = mercer_features(&k, &basis, 1e-12).unwrap();
    assert_eq!(fm.rank(), 1);
    assert!((fm.gram().matrix - k.matrix).amax() < 1e-12);
}

#[test]
fn entk_rank_is_bounded_by_parameter_count() {
    // 3 inputs, depth 2, width 1: four parameters.
    let s = init_mlp(3, 2, 1, 1.0, AlphaMode::WeightRescale, 8).unwrap();
    let x = sample_sphere(12, 3, 9).unwrap();
    let k = entk(&s, &x, &x).unwrap();
    let (vals, _) = vll::linalg::sym_eigen_desc(&k.matrix);
    let rank = vals.iter().filter(|v| **v > 1e-10 * vals[0]).count();
    assert!(rank <= s.param_count(), "rank {rank} > {}", s.param_count());
}

#[test]
fn oversized_kernel_requests_fail_cleanly() {
    let s = init_mlp(4, 3, 64, 1.0, AlphaMode::WeightRescale, 1).unwrap();
    let x = sample_sphere(100, 4, 2).unwrap();
    let r = entk_opts(&s, &x, &x, EntkOptions { block_rows: 16, budget_bytes: 1024 });
    assert!(matches!(r, Err(VllError::Budget { budget: 1024, .. })));
}

#[test]
fn basis_is_deterministic() {
    let grid = sample_sphere(10, 4, 1).unwrap();
    let a = FixedBasis::ntk_reference(&grid, 3, 1.0).unwrap();
    let b = FixedBasis::ntk_reference(&grid, 3, 1.0).unwrap();
    assert_eq!(a, b);
    let other = FixedBasis::ntk_reference(&sample_sphere(10, 4, 2).unwrap(), 3, 1.0).unwrap();
    assert_ne!(a.id, other.id);
}
