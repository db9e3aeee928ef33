//! Regularizer values on fields with known answers, evaluated through the
//! same graph code used for training.

mod common;

use common::oracles;

#[test]
fn bending_of_an_affine_field_is_exactly_zero() {
    assert_eq!(oracles::bending_of_affine(), 0.0);
}

#[test]
fn bending_of_a_square_field_is_four() {
    let b = oracles::bending_of_square();
    assert!((b - 4.0).abs() < 1e-3, "{b}");
}

#[test]
fn sinusoid_bending_matches_closed_form_within_two_percent() {
    let (est, exact) = oracles::sinusoid_bending(100_000, 3);
    assert!(((est - exact) / exact).abs() < 0.02, "estimate {est}, closed form {exact}");
}

#[test]
fn sinusoid_estimate_error_shrinks_with_sample_count() {
    let mean_err = |n: usize| {
        (0..8)
            .map(|seed| {
                let (e, x) = oracles::sinusoid_bending(n, seed);
                ((e - x) / x).abs()
            })
            .sum::<f64>()
            / 8.0
    };
    let (coarse, fine) = (mean_err(1_000), mean_err(100_000));
    assert!(fine < coarse, "error at 1e5 samples {fine} not below error at 1e3 samples {coarse}");
}

#[test]
fn jacobian_penalty_of_doubling_is_seven() {
    assert_eq!(oracles::jacobian_of_doubling(), 7.0);
}

#[test]
fn hyperelastic_penalty_of_identity_is_zero() {
    assert_eq!(oracles::hyperelastic_of_identity(), 0.0);
}
