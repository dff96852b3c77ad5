#![allow(dead_code)]

use pixel_barrier::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Relative error with a small floor so exactly-zero gradients compare
/// absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error between the tape gradient of `f` and central finite
/// differences of `f` evaluated without a tape.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&[Var]) -> Var,
{
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&leaves);
    let grads = loss.backward().expect("backward");
    let analytic: Vec<Tensor> = leaves.iter().map(|l| grads.wrt(l)).collect();

    let eval = |ts: &[Tensor]| -> f64 {
        let vars: Vec<Var> = ts.iter().cloned().map(Var::constant).collect();
        f(&vars).item()
    };
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i].data()[k], numeric));
        }
    }
    worst
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub mod cases;
