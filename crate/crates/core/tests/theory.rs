use csr_core::theory::{
    calibrated_gradient, calibrated_objective, closed_form_yw, closed_form_yw_batch,
    regression_loss, reward_scores, sample_world, theorem1_experiment, Convention, PolicyLinear,
    Regime, TheoryWorld, DOMINANCE_FACTOR,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    gaussian(rng, n, 1).column(0).into_owned()
}

#[test]
fn factors_have_orthonormal_columns() {
    for seed in 0..5 {
        let w = sample_world(seed, 8, 8, 8, 3, Regime::Theorem).unwrap();
        for u in [&w.u1, &w.u2] {
            let gram = u.transpose() * u;
            assert!((gram - DMatrix::identity(3, 3)).abs().max() < 1e-10);
        }
        assert!((w.beta_star.norm() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn image_signal_dominates_in_theorem_worlds() {
    for seed in 0..20 {
        let w = sample_world(seed, 6, 6, 6, 2, Regime::Theorem).unwrap();
        assert!(w.dominance_ratio().unwrap() >= DOMINANCE_FACTOR);
    }
}

#[test]
fn bad_dimensions_are_rejected() {
    assert!(sample_world(0, 4, 4, 4, 5, Regime::Generic).is_err());
    assert!(sample_world(0, 4, 5, 4, 2, Regime::Theorem).is_err());
    assert!(sample_world(0, 0, 4, 4, 1, Regime::Generic).is_err());
    let g = sample_world(0, 4, 5, 3, 2, Regime::Generic).unwrap();
    let x_v = DVector::zeros(4);
    let x_t = DVector::zeros(5);
    assert!(reward_scores(&g, &g.policy, &x_v, &x_t, &DVector::zeros(3)).is_err());
    assert!(closed_form_yw(&g, &g.policy, &x_v, &x_t, 0.5, Convention::TextWeighted).is_err());
}

/// Two-dimensional world with hand-picked maps.
fn hand_world() -> TheoryWorld {
    let u1 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
    let u2 = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
    let v1 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
    let v2 = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -1.0]);
    TheoryWorld {
        regime: Regime::Generic,
        d_v: 2,
        d_t: 2,
        d_y: 2,
        r: 1,
        u1,
        u2,
        v1_star: v1.clone(),
        v2_star: v2.clone(),
        beta_star: DVector::from_column_slice(&[1.0, 0.0]),
        noise_v: 0.1,
        noise_t: 0.1,
        noise_y: 0.1,
        sigma: 1.0,
        policy: PolicyLinear { v1, v2 },
    }
}

#[test]
fn reward_scores_by_hand() {
    let w = hand_world();
    let x_v = DVector::from_column_slice(&[3.0, 1.0]);
    let x_t = DVector::from_column_slice(&[2.0, 4.0]);
    let y = DVector::from_column_slice(&[1.0, 2.0]);
    // mean = V1 x_v + V2 x_t = (5, 1) + (1, -4) = (6, -3)
    // R_I = (U1ᵀx_v)(U2ᵀy) = 3 · 2 = 6
    // R_T = −((1−6)² + (2+3)²) = −50
    let (r_i, r_t) = reward_scores(&w, &w.policy, &x_v, &x_t, &y).unwrap();
    assert_eq!(r_i, 6.0);
    assert_eq!(r_t, -50.0);

    let mean = w.policy.mean(&x_v, &x_t);
    assert_eq!(reward_scores(&w, &w.policy, &x_v, &x_t, &mean).unwrap().1, 0.0);
    let zero = DVector::zeros(2);
    assert_eq!(reward_scores(&w, &w.policy, &zero, &x_t, &y).unwrap().0, 0.0);

    // y_w = c·U1U1ᵀx_v + mean with c = (1 − 0.5)/0.5 = 1
    let yw = closed_form_yw(&w, &w.policy, &x_v, &x_t, 0.5, Convention::TextWeighted).unwrap();
    assert_eq!(yw, DVector::from_column_slice(&[9.0, -3.0]));
}

#[test]
fn text_only_weight_returns_the_policy_mean() {
    let w = sample_world(3, 5, 5, 5, 2, Regime::Theorem).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x_v, x_t) = (vector(&mut rng, 5), vector(&mut rng, 5));
    let yw = closed_form_yw(&w, &w.policy, &x_v, &x_t, 1.0, Convention::TextWeighted).unwrap();
    assert!((yw - w.policy.mean(&x_v, &x_t)).norm() < 1e-14);
    let yw = closed_form_yw(&w, &w.policy, &x_v, &x_t, 0.0, Convention::ImageWeighted).unwrap();
    assert!((yw - w.policy.mean(&x_v, &x_t)).norm() < 1e-14);
}

#[test]
fn image_outside_the_shared_subspace_changes_nothing() {
    let w = sample_world(4, 6, 6, 6, 2, Regime::Theorem).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let raw = vector(&mut rng, 6);
    let x_v = &raw - &w.u1 * (w.u1.transpose() * &raw);
    assert!((w.u1.transpose() * &x_v).norm() < 1e-12);
    let x_t = vector(&mut rng, 6);
    let yw = closed_form_yw(&w, &w.policy, &x_v, &x_t, 0.3, Convention::TextWeighted).unwrap();
    assert!((yw - w.policy.mean(&x_v, &x_t)).norm() < 1e-10);
}

/// Central differences of the objective, exact up to rounding for a quadratic.
fn numeric_gradient(
    w: &TheoryWorld,
    x_v: &DVector<f64>,
    x_t: &DVector<f64>,
    y: &DVector<f64>,
    lambda: f64,
    convention: Convention,
) -> DVector<f64> {
    let h = 1e-4;
    DVector::from_fn(y.len(), |i, _| {
        let mut plus = y.clone();
        plus[i] += h;
        let mut minus = y.clone();
        minus[i] -= h;
        let f = |v: &DVector<f64>| calibrated_objective(w, &w.policy, x_v, x_t, v, lambda, convention).unwrap();
        (f(&plus) - f(&minus)) / (2.0 * h)
    })
}

#[test]
fn closed_form_agrees_with_gradient_ascent() {
    let w = sample_world(5, 6, 6, 6, 3, Regime::Theorem).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for convention in [Convention::TextWeighted, Convention::ImageWeighted] {
        for lambda in [0.2, 0.5, 0.9] {
            let (x_v, x_t) = (vector(&mut rng, 6), vector(&mut rng, 6));
            let yw = closed_form_yw(&w, &w.policy, &x_v, &x_t, lambda, convention).unwrap();
            let curvature = match convention {
                Convention::TextWeighted => lambda,
                Convention::ImageWeighted => 2.0 * (1.0 - lambda),
            };
            let mut y = DVector::zeros(6);
            for _ in 0..200 {
                y += numeric_gradient(&w, &x_v, &x_t, &y, lambda, convention) * (0.5 / curvature);
            }
            assert!((&y - &yw).norm() < 1e-6, "{convention:?} λ={lambda}: {}", (&y - &yw).norm());
            let g = calibrated_gradient(&w, &w.policy, &x_v, &x_t, &yw, lambda, convention).unwrap();
            assert!(g.norm() < 1e-8);
            let g_far = calibrated_gradient(&w, &w.policy, &x_v, &x_t, &y.scale(2.0), lambda, convention).unwrap();
            let fd = numeric_gradient(&w, &x_v, &x_t, &y.scale(2.0), lambda, convention);
            assert!((g_far - fd).norm() < 1e-6);
        }
    }
}

#[test]
fn batch_closed_form_matches_per_sample() {
    let w = sample_world(6, 5, 5, 5, 2, Regime::Theorem).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = w.sample(&mut rng, 30);
    for convention in [Convention::TextWeighted, Convention::ImageWeighted] {
        let batch = closed_form_yw_batch(&w, &w.policy, &s, 0.4, convention).unwrap();
        for j in 0..30 {
            let x_v = s.x_v.column(j).into_owned();
            let x_t = s.x_t.column(j).into_owned();
            let one = closed_form_yw(&w, &w.policy, &x_v, &x_t, 0.4, convention).unwrap();
            assert!((batch.column(j) - one).norm() < 1e-12);
        }
    }
}

#[test]
fn realizable_target_has_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let y = gaussian(&mut rng, 4, 500);
    let beta = DVector::from_column_slice(&[0.5, -1.0, 2.0, 0.25]);
    let z = y.transpose() * &beta;
    let fit = regression_loss(&y, &z).unwrap();
    assert!(fit.loss < 1e-12);
    assert!((fit.beta - beta).norm() < 1e-6);
}

#[test]
fn independent_target_keeps_its_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 50_000;
    let y = gaussian(&mut rng, 3, n);
    let z = vector(&mut rng, n);
    let fit = regression_loss(&y, &z).unwrap();
    assert!((fit.loss - 1.0).abs() < 0.03, "{}", fit.loss);
}

/// Normal equations summed sample by sample and solved by LU.
fn probe_oracle(y: &DMatrix<f64>, z: &DVector<f64>) -> f64 {
    let (d, n) = y.shape();
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    for j in 0..n {
        for a in 0..d {
            rhs[a] += y[(a, j)] * z[j];
            for b in 0..d {
                gram[(a, b)] += y[(a, j)] * y[(b, j)];
            }
        }
    }
    let beta = gram.lu().solve(&rhs).unwrap();
    let mut loss = 0.0;
    for j in 0..n {
        let pred: f64 = (0..d).map(|a| beta[a] * y[(a, j)]).sum();
        loss += (z[j] - pred).powi(2);
    }
    loss / n as f64
}

#[test]
fn probe_matches_summed_normal_equations() {
    let w = sample_world(9, 6, 6, 6, 3, Regime::Theorem).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = w.sample(&mut rng, 50_000);
    let y = closed_form_yw_batch(&w, &w.policy, &s, 0.5, Convention::TextWeighted).unwrap();
    let fit = regression_loss(&y, &s.z).unwrap();
    let want = probe_oracle(&y, &s.z);
    assert!((fit.loss - want).abs() < 1e-8 * want.max(1.0), "{} vs {want}", fit.loss);
}

#[test]
fn probe_loss_invariant_under_invertible_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let y = gaussian(&mut rng, 4, 2000);
    let z = vector(&mut rng, 2000) + y.row(0).transpose();
    let a = gaussian(&mut rng, 4, 4) + DMatrix::identity(4, 4) * 3.0;
    let l1 = regression_loss(&y, &z).unwrap().loss;
    let l2 = regression_loss(&(a * &y), &z).unwrap().loss;
    assert!((l1 - l2).abs() < 1e-8);
}

#[test]
fn standard_error_shrinks_with_sample_size() {
    let w = sample_world(11, 6, 6, 6, 3, Regime::Theorem).unwrap();
    let grid = [0.5, 1.0];
    let a = theorem1_experiment(&w, &grid, 20_000, 11, Convention::TextWeighted).unwrap();
    let b = theorem1_experiment(&w, &grid, 40_000, 11, Convention::TextWeighted).unwrap();
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        let ratio = rb.stderr / ra.stderr;
        let ideal = 1.0 / 2f64.sqrt();
        assert!((ratio - ideal).abs() < 0.2 * ideal, "ratio {ratio}");
    }
}

#[test]
fn calibration_helps_when_image_signal_dominates() {
    let w = sample_world(0, 8, 8, 8, 4, Regime::Theorem).unwrap();
    let grid = [0.1, 0.3, 0.5, 0.7, 0.9, 1.0];
    for convention in [Convention::TextWeighted, Convention::ImageWeighted] {
        let r = theorem1_experiment(&w, &grid, 50_000, 0, convention).unwrap();
        assert!(r.verdict, "{convention:?} margin {}", r.margin_se);
        assert!(r.best_lambda < 1.0);
        assert_eq!(r.rows.len(), grid.len());
        assert!(r.rows.iter().all(|row| row.loss_estimate.is_finite() && row.stderr > 0.0));
    }
}

#[test]
fn control_policy_gains_nothing() {
    let w = sample_world(1, 8, 8, 8, 4, Regime::Control).unwrap();
    let grid = [0.1, 0.3, 0.5, 0.7, 0.9, 1.0];
    let r = theorem1_experiment(&w, &grid, 50_000, 1, Convention::TextWeighted).unwrap();
    assert!(!r.verdict, "margin {}", r.margin_se);
}

#[test]
fn experiment_is_deterministic_and_checks_inputs() {
    let w = sample_world(12, 4, 4, 4, 2, Regime::Theorem).unwrap();
    let grid = [0.5, 1.0];
    let a = theorem1_experiment(&w, &grid, 10_000, 3, Convention::TextWeighted).unwrap();
    let b = theorem1_experiment(&w, &grid, 10_000, 3, Convention::TextWeighted).unwrap();
    assert_eq!(a, b);
    assert!(theorem1_experiment(&w, &grid, 9_999, 3, Convention::TextWeighted).is_err());
    assert!(theorem1_experiment(&w, &[0.5], 10_000, 3, Convention::TextWeighted).is_err());
    assert!(theorem1_experiment(&w, &[0.0, 1.0], 10_000, 3, Convention::TextWeighted).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generic_worlds_give_finite_losses(seed in 0u64..10_000, d in 2usize..6, lambda in 0.05f64..0.95) {
        let r = 1 + seed as usize % d;
        let w = sample_world(seed, d, d, d, r, Regime::Generic).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = w.sample(&mut rng, 200);
        for convention in [Convention::TextWeighted, Convention::ImageWeighted] {
            let y = closed_form_yw_batch(&w, &w.policy, &s, lambda, convention).unwrap();
            let fit = regression_loss(&y, &s.z).unwrap();
            prop_assert!(fit.loss.is_finite() && fit.loss >= 0.0);
        }
    }

    #[test]
    fn image_coefficients(lambda in 0.01f64..0.99) {
        let t = Convention::TextWeighted.image_coefficient(lambda).unwrap();
        let i = Convention::ImageWeighted.image_coefficient(lambda).unwrap();
        prop_assert!((t - (1.0 - lambda) / lambda).abs() < 1e-12 * t.max(1.0));
        prop_assert!((i - lambda / (2.0 * (1.0 - lambda))).abs() < 1e-12 * i.max(1.0));
    }
}
