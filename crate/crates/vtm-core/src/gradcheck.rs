//! Central finite-difference gradient checking.
//!
//! The checker is independent of the tape's backward rules: it re-evaluates
//! the forward closure at perturbed inputs and compares the resulting slopes
//! against the analytic gradient. Used by the test suites to validate every
//! differentiable primitive and the full network block.

use crate::autodiff::{Graph, NodeId};

/// Default central-difference step.
pub const FD_STEP: f32 = 1e-3;

/// Relative-error floor: entries whose analytic and numeric gradients are
/// both below this magnitude are compared absolutely against it.
pub const REL_FLOOR: f64 = 1e-3;

/// Max relative error between two gradient vectors, with a small-magnitude
/// floor in the denominator.
pub fn max_rel_err(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        let denom = x.abs().max(y.abs()).max(REL_FLOOR);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}

/// Central finite differences of `f` (a scalar function of the parameter
/// vector) at `theta`, step `h`.
pub fn central_differences(theta: &[f32], mut f: impl FnMut(&[f32]) -> f32, h: f32) -> Vec<f32> {
    let mut grad = vec![0.0f32; theta.len()];
    let mut work = theta.to_vec();
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + h;
        let up = f(&work) as f64;
        work[i] = orig - h;
        let down = f(&work) as f64;
        work[i] = orig;
        grad[i] = ((up - down) / (2.0 * h as f64)) as f32;
    }
    grad
}

/// Run `build` (which must construct a graph from the parameter vector and
/// return the parameter leaf plus a scalar loss node), backprop, and compare
/// the analytic parameter gradient against central differences.
///
/// Returns the max relative error.
pub fn check_gradient(
    theta: &[f32],
    build: impl Fn(&mut Graph, &[f32]) -> (NodeId, NodeId),
    h: f32,
) -> f64 {
    let mut g = Graph::new();
    let (leaf, loss) = build(&mut g, theta);
    g.backward(loss).expect("backward failed in gradient check");
    let analytic = g.grad(leaf).expect("parameter gradient missing").to_vec();

    let numeric = central_differences(
        theta,
        |t| {
            let mut g = Graph::new();
            let (_, loss) = build(&mut g, t);
            g.value(loss).data()[0]
        },
        h,
    );
    max_rel_err(&analytic, &numeric)
}
