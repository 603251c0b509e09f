use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use saspec_core::linalg::{Matrix, SpectralTriple};
use saspec_core::mlp::{backward_exact, forward, softmax_cross_entropy, MlpState};
use saspec_core::theory::*;
use saspec_core::Error;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn tiny() -> MlpState {
    MlpState::from_weights(vec![
        Matrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 1.0]]).unwrap(),
        Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap(),
    ])
    .unwrap()
}

// Expected values computed by hand (Python, float64) for x = [1, 2], target 0.
const G1: [f64; 4] = [-0.04742587317756686, -0.04742587317756678, -0.09485174635513371, -0.09485174635513356];
const G2: [f64; 4] = [-0.09485174635513371, 0.09485174635513356, -0.04742587317756686, 0.04742587317756678];

#[test]
fn gradients_match_hand_values() {
    let m = tiny();
    let t = forward(&m, &[1.0, 2.0]).unwrap();
    let (loss, p) = softmax_cross_entropy(t.logits(), 0).unwrap();
    assert!(close(loss, 0.04858735157374214, 1e-15));
    let g = backward_exact(&m, &t, &p, 0).unwrap();
    let lit1 = product_formula_gradient(&m, &t, &p, 0, 1).unwrap();
    let lit2 = product_formula_gradient(&m, &t, &p, 0, 2).unwrap();
    for (i, e) in G1.iter().enumerate() {
        assert!(close(g[0].data()[i], *e, 1e-15));
        assert!(close(lit1.data()[i], *e, 1e-15));
    }
    for (i, e) in G2.iter().enumerate() {
        assert!(close(g[1].data()[i], *e, 1e-15));
        assert!(close(lit2.data()[i], *e, 1e-15));
    }
}

#[test]
fn rho_counts_active_units() {
    let eye = Matrix::identity(2);
    let m = MlpState::from_weights(vec![eye.clone(), eye.clone(), eye]).unwrap();
    let a = forward(&m, &[1.0, -1.0]).unwrap();
    let b = forward(&m, &[1.0, 1.0]).unwrap();
    let one = estimate_rho(std::slice::from_ref(&a), 1).unwrap();
    assert_eq!(one.per_layer_active_fractions, vec![0.5, 0.5]);
    assert_eq!(one.rho, 0.25);
    let both = estimate_rho(&[a.clone(), b], 2).unwrap();
    assert_eq!(both.per_layer_active_fractions, vec![0.75]);
    assert!(matches!(estimate_rho(&[], 1), Err(Error::EmptyTraces)));
    assert!(estimate_rho(std::slice::from_ref(&a), 3).is_err());
    assert!(estimate_rho(&[a], 0).is_err());
}

#[test]
fn approximation_is_exact_when_every_unit_fires() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ws: Vec<Matrix> = [(4, 5), (5, 6), (6, 3)]
        .iter()
        .map(|&(r, c)| Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap())
        .collect();
    let m = MlpState::from_weights(ws).unwrap();
    let t = forward(&m, &[0.5, 1.0, 0.2, 0.7]).unwrap();
    let (_, p) = softmax_cross_entropy(t.logits(), 2).unwrap();
    let exact = backward_exact(&m, &t, &p, 2).unwrap();
    for l in 1..3 {
        let rho = estimate_rho(std::slice::from_ref(&t), l).unwrap().rho;
        assert_eq!(rho, 1.0);
        let approx = approx_gradient(&m, &t, &p, 2, rho, l).unwrap();
        let literal = product_formula_gradient(&m, &t, &p, 2, l).unwrap();
        assert_eq!(approx.data(), literal.data(), "layer {l}");
        let gap = approx.data().iter().zip(exact[l - 1].data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-14, "layer {l}: {gap}");
        assert!(close(cosine_similarity(&approx, &exact[l - 1]).unwrap(), 1.0, 1e-12));
    }
    assert!(approx_gradient(&m, &t, &p, 2, 1.5, 1).is_err());
    assert!(approx_gradient(&m, &t, &p, 2, 1.0, 3).is_err());
}

#[test]
fn logit_deviation_examples() {
    let ld = logit_deviation(&[0.7, 0.2, 0.1], 0, &[2.0, 1.0, 0.0]).unwrap();
    assert!(close(ld.dot_form, -0.4, 1e-15));
    assert!(close(ld.expectation_form, -0.4, 1e-15));
    assert!(logit_deviation(&[0.5, 0.5], 2, &[1.0, 0.0]).is_err());
    assert!(logit_deviation(&[0.5, 0.6], 0, &[1.0, 0.0]).is_err());
    assert!(logit_deviation(&[1.0], 0, &[1.0, 0.0]).is_err());
}

#[test]
fn growth_prediction_hand_example() {
    let w = Matrix::from_diag(&[2.0, 1.0]);
    let spec = SpectralTriple {
        sigma1: 2.0,
        u1: vec![1.0, 0.0],
        v1: vec![1.0, 0.0],
        iterations: 0,
        converged: true,
        residual: 0.0,
    };
    let z = [2.0, 0.0];
    let (_, p) = softmax_cross_entropy(&z, 0).unwrap();
    let s = SampleTerms { h: &[3.0, 4.0], f: &[6.0, 4.0], p: &p, target: 0, logits: &z };
    let d = predict_delta_specnorm(&w, &spec, &s, 0.1, 0.5).unwrap();
    assert!(close(d, 0.02975484790633019, 1e-15));
    let flipped = SpectralTriple { u1: vec![-1.0, 0.0], v1: vec![-1.0, 0.0], ..spec };
    assert!(close(predict_delta_specnorm(&w, &flipped, &s, 0.1, 0.5).unwrap(), d, 1e-15));
}

#[test]
fn perturbation_rejects_degenerate_and_bad_schedules() {
    let a = Matrix::identity(3);
    let b = Matrix::from_diag(&[1.0, 2.0, 3.0]);
    assert!(matches!(verify_perturbation_order(&a, &b, &PERTURBATION_ETAS), Err(Error::DegenerateSpectrum { .. })));
    let a = Matrix::from_diag(&[3.0, 1.0, 0.5]);
    assert!(verify_perturbation_order(&a, &b, &[1e-2, 5e-3]).is_err());
    assert!(verify_perturbation_order(&a, &b, &[1e-2, 4e-3, 2e-3]).is_err());
}

#[test]
fn diagonal_perturbation_is_exactly_linear() {
    // Same singular vectors: the first-order prediction is exact.
    let a = Matrix::from_diag(&[3.0, 1.0, 0.5]);
    let b = Matrix::from_diag(&[1.0, 0.0, 0.0]);
    let r = verify_perturbation_order(&a, &b, &PERTURBATION_ETAS).unwrap();
    assert!(r.errors.iter().all(|&e| e < 1e-12));
    assert!(r.floored && r.passes());
}

#[test]
fn forced_alignment_construction() {
    let fa = ForcedAlignment::build(&ForcedAlignmentConfig::default()).unwrap();
    assert!(fa.pathology_ratio().unwrap() < 1e-12);
    assert!(fa.worst_logit_dev().unwrap() < 0.0);
    let g = fa.growth(1e-3).unwrap();
    assert!(g.actual_delta > 0.0 && g.sign_agrees);
    assert!(g.alpha > 0.0 && g.proj_f_v1 > 0.0 && g.logit_dev < 0.0);

    let noisy = ForcedAlignmentConfig { noise: 1.0, ..Default::default() };
    assert!(matches!(ForcedAlignment::build(&noisy), Err(Error::InvalidConfig(_))));
    let tight = ForcedAlignmentConfig { pretrain_budget: 0, seed: 1, ..Default::default() };
    match ForcedAlignment::build(&tight) {
        Ok(fa) => assert_eq!(fa.pretrain_steps, 0),
        Err(e) => assert!(matches!(e, Error::RegionNotReached { steps: 0, .. })),
    }
}

#[test]
fn orthogonal_batch_has_no_alignment() {
    let cfg = ForcedAlignmentConfig { geometry: Geometry::Orthogonal, noise: 0.5, ..Default::default() };
    let fa = ForcedAlignment::build(&cfg).unwrap();
    let g = fa.growth(1e-3).unwrap();
    assert!(g.alpha.abs() < 1e-12);
    assert!(g.predicted_delta.abs() < 1e-12);
}

#[test]
fn zero_step_size_freezes_the_spectrum() {
    let cfg = ForcedAlignmentConfig { upper_scale: AMPLIFICATION_UPPER_SCALE, ..Default::default() };
    let a = amplification_check(&cfg, 0.0, 5).unwrap();
    assert!(a.sigma1_series.windows(2).all(|w| w[0] == w[1]));
    assert!(amplification_check(&cfg, 0.05, 4).is_err());
}

#[test]
fn suites_pass_and_report() {
    for s in Suite::ALL {
        let rep = run_suite(s, s.default_trials().min(10), 11);
        assert!(rep.passed, "{}: {:?}", s.name(), rep.failures);
        assert!(!rep.lines.is_empty());
        assert_eq!(Suite::parse(s.name()), Some(s));
    }
    assert_eq!(Suite::parse("everything"), None);
}

#[test]
fn rho_is_a_fraction_and_one_only_without_dead_units() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let m = random_mlp(&mut rng, 6).unwrap();
        let traces: Vec<_> = (0..rng.random_range(1..4))
            .map(|_| {
                let x: Vec<f64> = (0..m.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
                forward(&m, &x).unwrap()
            })
            .collect();
        for l in 1..m.depth() {
            let est = estimate_rho(&traces, l).unwrap();
            assert!((0.0..=1.0).contains(&est.rho));
            let all_on = traces.iter().all(|t| (l..m.depth()).all(|k| t.mask(k).iter().all(|&b| b)));
            assert_eq!(est.rho == 1.0, all_on);
        }
    }
}
