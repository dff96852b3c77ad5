//! Finite-difference checks of the four training objectives with respect to
//! the parameters each one updates.

mod common;

use common::cases;
use common::FD_TOLERANCE;

fn check(case: fn() -> f64) {
    let err = case();
    assert!(err < FD_TOLERANCE, "{err}");
}

#[test]
fn model_loss_matches_finite_differences() {
    check(cases::model_loss);
}

#[test]
fn barrier_loss_matches_finite_differences() {
    check(cases::barrier_loss_case);
}

#[test]
fn policy_loss_matches_finite_differences() {
    check(cases::policy_loss_case);
}

#[test]
fn critic_loss_matches_finite_differences() {
    check(cases::critic_loss_case);
}
