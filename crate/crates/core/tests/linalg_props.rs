use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use saspec_core::linalg::*;

fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::random_normal(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn diagonal_example() {
    let w = Matrix::from_diag(&[3.0, 1.0]);
    let s = top_singular(&w).unwrap();
    assert!((s.sigma1 - 3.0).abs() < 1e-12);
    assert!((s.u1[0].abs() - 1.0).abs() < 1e-9 && s.u1[1].abs() < 1e-6);
    assert!((stable_rank(&w, &s).unwrap() - 10.0 / 9.0).abs() < 1e-10);
}

#[test]
fn rank_one_outer_product() {
    let u = [0.6, 0.8];
    let v = [0.0, 1.0, 0.0];
    let w = Matrix::outer(&u, &v).scaled(5.0);
    let s = top_singular(&w).unwrap();
    assert!((s.sigma1 - 5.0).abs() < 1e-12);
    assert!((s.u1[0] - 0.6).abs() < 1e-12 && (s.u1[1] - 0.8).abs() < 1e-12);
    assert!((stable_rank(&w, &s).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn zero_matrix_is_rejected() {
    assert!(top_singular(&Matrix::zeros(3, 2)).is_err());
}

#[test]
fn oracle_reconstructs_and_orders() {
    let w = matrix(7, 5, 1);
    let t = svd_small_oracle(&w).unwrap();
    assert_eq!(t.len(), 5);
    assert!(t.windows(2).all(|p| p[0].sigma >= p[1].sigma));
    let back = reconstruct(&t, 7, 5);
    let gap = back.data().iter().zip(w.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap < 1e-12);
    assert!(svd_small_oracle(&Matrix::zeros(ORACLE_MAX_DIM + 1, ORACLE_MAX_DIM + 1)).is_err());
}

#[test]
fn first_order_change_is_exact_for_aligned_perturbation() {
    let a = Matrix::from_diag(&[4.0, 2.0, 1.0]);
    let b = Matrix::from_diag(&[1.0, 0.0, 0.0]);
    let pred = first_order_spectral_change(&a, &b, 0.1).unwrap();
    assert!((pred - 4.1).abs() < 1e-12);
}

#[test]
fn sign_follows_reference_or_largest_entry() {
    assert_eq!(canonicalize_sign(&[0.1, -0.9], None), vec![-0.1, 0.9]);
    assert_eq!(canonicalize_sign(&[0.1, -0.9], Some(&[1.0, 0.0])), vec![0.1, -0.9]);
    assert_eq!(canonicalize_sign(&[0.6, 0.8], Some(&[0.0, -1.0])), vec![-0.6, -0.8]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn power_iteration_matches_oracle(rows in 1usize..24, cols in 1usize..24, seed in any::<u64>()) {
        let w = matrix(rows, cols, seed);
        let oracle = svd_small_oracle(&w).unwrap();
        prop_assume!(oracle.len() < 2 || oracle[0].sigma >= 1.01 * oracle[1].sigma);
        let s = top_singular(&w).unwrap();
        prop_assert!((s.sigma1 - oracle[0].sigma).abs() <= 1e-8 * oracle[0].sigma);
        let align = dot(&s.u1, &oracle[0].u).abs();
        prop_assert!((align - 1.0).abs() < 1e-6);
        prop_assert!((norm2(&s.u1) - 1.0).abs() < 1e-12);
        prop_assert!((norm2(&s.v1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stable_rank_is_scale_invariant(rows in 1usize..16, cols in 1usize..16, seed in any::<u64>(), c in -50.0f64..50.0) {
        prop_assume!(c.abs() > 1e-3);
        let w = matrix(rows, cols, seed);
        let oracle = svd_small_oracle(&w).unwrap();
        prop_assume!(oracle.len() < 2 || oracle[0].sigma >= 1.01 * oracle[1].sigma);
        let a = stable_rank(&w, &top_singular(&w).unwrap()).unwrap();
        let ws = w.scaled(c);
        let b = stable_rank(&ws, &top_singular(&ws).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
        prop_assert!(a >= 1.0 - 1e-12 && a <= rows.min(cols) as f64 + 1e-9);
    }

    #[test]
    fn canonical_sign_is_stable(seed in any::<u64>(), n in 1usize..12) {
        let u = random_unit_vector(n, &mut ChaCha8Rng::seed_from_u64(seed));
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        prop_assert_eq!(canonicalize_sign(&u, None), canonicalize_sign(&neg, None));
        let r = random_unit_vector(n, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let c = canonicalize_sign(&neg, Some(&r));
        prop_assert!(dot(&c, &r) >= 0.0);
    }

    #[test]
    fn transpose_shares_spectrum(rows in 1usize..12, cols in 1usize..12, seed in any::<u64>()) {
        let w = matrix(rows, cols, seed);
        let a = svd_small_oracle(&w).unwrap();
        let b = svd_small_oracle(&w.transpose()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.sigma - y.sigma).abs() < 1e-10);
        }
    }

    #[test]
    fn power_iteration_is_scale_equivariant(rows in 1usize..16, cols in 1usize..16, seed in any::<u64>(), c in 0.01f64..100.0) {
        let w = matrix(rows, cols, seed);
        let oracle = svd_small_oracle(&w).unwrap();
        prop_assume!(oracle.len() < 2 || oracle[0].sigma >= 1.01 * oracle[1].sigma);
        let a = top_singular(&w).unwrap();
        let b = top_singular(&w.scaled(c)).unwrap();
        prop_assert!((b.sigma1 - c * a.sigma1).abs() <= 1e-8 * c * a.sigma1);
        prop_assert!((dot(&a.u1, &b.u1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn canonicalization_is_idempotent(seed in any::<u64>(), n in 1usize..12, with_ref in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_unit_vector(n, &mut rng);
        let r = random_unit_vector(n, &mut rng);
        let reference = with_ref.then_some(&r[..]);
        let once = canonicalize_sign(&u, reference);
        prop_assert_eq!(canonicalize_sign(&once, reference), once);
    }
}

#[test]
fn first_order_error_is_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for n in [3, 5, 8, 12] {
        for _ in 0..5 {
            let (a, b) = saspec_core::theory::random_perturbation_pair(&mut rng, n).unwrap();
            let err = |eta: f64| {
                let mut p = a.clone();
                p.add_scaled(eta, &b).unwrap();
                let exact = svd_small_oracle(&p).unwrap()[0].sigma;
                (exact - first_order_spectral_change(&a, &b, eta).unwrap()).abs()
            };
            let (e1, e2) = (err(1e-2), err(5e-3));
            assert!(e2 > 1e-12);
            assert!((3.5..=4.5).contains(&(e1 / e2)), "n {n}: {e1} / {e2}");
        }
    }
}
