mod common;

use common::{gradient_error, model_cases, primitive_cases, FD_TOLERANCE};

#[test]
fn primitives_match_finite_differences() {
    for case in primitive_cases() {
        let err = gradient_error(&case);
        assert!(err <= FD_TOLERANCE, "{}: relative error {err:.2e}", case.name);
    }
}

#[test]
fn model_losses_match_finite_differences() {
    for case in model_cases() {
        let err = gradient_error(&case);
        assert!(err <= FD_TOLERANCE, "{}: relative error {err:.2e}", case.name);
    }
}
