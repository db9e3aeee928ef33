//! Finite-difference checks of parameter gradients and of the propagated
//! input derivatives on small random networks.

mod common;

use common::{input_derivative_errors, param_gradient_checks};

#[test]
fn parameter_gradients_match_central_differences_on_100_seeds() {
    let mut worst = (0.0, 0, "");
    for seed in 0..100 {
        for c in param_gradient_checks(seed) {
            assert!(c.checked > 0);
            if c.max_rel_err > worst.0 {
                worst = (c.max_rel_err, c.seed, c.reg);
            }
        }
    }
    assert!(
        worst.0 < 1e-3,
        "largest relative error {:.3e} at seed {} ({})",
        worst.0,
        worst.1,
        worst.2
    );
}

#[test]
fn input_jacobians_and_hessians_match_central_differences() {
    for seed in 0..100 {
        let (jac, hess) = input_derivative_errors(seed);
        assert!(jac < 1e-4, "seed {seed}: Jacobian relative error {jac:.3e}");
        assert!(hess < 1e-3, "seed {seed}: Hessian relative error {hess:.3e}");
    }
}
