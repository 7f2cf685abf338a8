//! Central finite-difference checking of tape gradients.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward closures it validates. Used by unit tests
//! and the acceptance suite.

use crate::nn::autodiff::{Tape, Var};
use crate::nn::tensor::Tensor;
use crate::rng::Rng;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Max relative error between tape gradients and central differences
/// for a scalar-valued builder over the given leaves.
pub fn max_rel_err_for(
    leaves: &[Tensor],
    build: impl Fn(&Tape, &[Var]) -> Var,
    h: f64,
) -> f64 {
    let eval = |tensors: &[Tensor]| -> f64 {
        let tape = Tape::inference();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&tape, &vars);
        tape.scalar(out)
    };

    let tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&tape, &vars);
    assert_eq!(out.shape(), (1, 1), "gradcheck target must be scalar");
    tape.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for k in 0..leaf.data().len() {
            let orig = leaf.data()[k];
            work[li].data_mut()[k] = orig + h;
            let fp = eval(&work);
            work[li].data_mut()[k] = orig - h;
            let fm = eval(&work);
            work[li].data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[li].data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Same check over random leaves of the given shapes. Entries are kept
/// away from the ReLU kink (|x| >= 0.1).
pub fn max_rel_err(
    shapes: &[(usize, usize)],
    build: impl Fn(&Tape, &[Var]) -> Var,
    seed: u64,
) -> f64 {
    let mut rng = Rng::new(seed);
    let leaves: Vec<Tensor> = shapes
        .iter()
        .map(|&(r, c)| {
            let mut t = Tensor::zeros(r, c);
            for v in t.data_mut() {
                let u = rng.uniform() * 2.0 - 1.0;
                *v = if u.abs() < 0.1 { 0.1 * u.signum() + u } else { u };
            }
            t
        })
        .collect();
    max_rel_err_for(&leaves, build, DEFAULT_STEP)
}
