//! Tape gradients against central finite differences for every
//! differentiable operation of the tensor engine.

mod common;

use common::cases;
use common::{random_tensor, rng, FD_TOLERANCE};
use pixel_barrier::Var;

fn check(case: fn() -> f64) {
    let err = case();
    assert!(err < FD_TOLERANCE, "{err}");
}

#[test]
fn conv2d_matches_finite_differences() {
    check(cases::conv2d);
}

#[test]
fn conv2d_transpose_matches_finite_differences() {
    check(cases::conv2d_transpose);
}

#[test]
fn dense_tanh_dense_matches_finite_differences() {
    check(cases::dense_tanh_dense);
}

#[test]
fn elementwise_activations_match_finite_differences() {
    check(cases::activations);
}

#[test]
fn reductions_and_shape_ops_match_finite_differences() {
    check(cases::reductions_and_shapes);
}

#[test]
fn gaussian_kl_matches_finite_differences() {
    check(cases::gaussian_kl);
}

#[test]
fn reparam_sample_matches_finite_differences() {
    check(cases::reparam_sample);
}

#[test]
fn gru_chain_of_three_steps_matches_finite_differences() {
    check(cases::gru_three_steps);
}

#[test]
fn conv2d_transpose_is_the_adjoint_of_conv2d() {
    // <conv(x, k), y> == <x, conv_t(y, k)>
    let mut r = rng(3);
    let x = random_tensor(&mut r, &[2, 3, 8, 8], -1.0, 1.0);
    let k = random_tensor(&mut r, &[4, 3, 4, 4], -1.0, 1.0);
    let y = random_tensor(&mut r, &[2, 4, 4, 4], -1.0, 1.0);
    let cx = Var::constant(x.clone()).conv2d(&Var::constant(k.clone()), 2, 1).unwrap();
    let ty = Var::constant(y.clone()).conv2d_transpose(&Var::constant(k), 2, 1).unwrap();
    assert_eq!(ty.shape(), x.shape());
    let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
}
