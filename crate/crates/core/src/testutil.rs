//! Finite-difference gradient checking shared by test modules.

use crate::tensor::{Graph, TensorId};

/// Central-difference gradient of a scalar-valued graph builder with
/// respect to one leaf. `build` must construct the same computation from a
/// fresh graph and the supplied leaf data each call, returning the leaf it
/// created and the loss node.
pub fn numerical_grad(
    build: &dyn Fn(&mut Graph, &[f64]) -> (TensorId, TensorId),
    x0: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(x0.len());
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + eps;
        let mut g = Graph::new();
        let (_, hi_id) = build(&mut g, &x);
        let hi = g.data(hi_id)[0];
        x[i] = x0[i] - eps;
        let mut g = Graph::new();
        let (_, lo_id) = build(&mut g, &x);
        let lo = g.data(lo_id)[0];
        x[i] = x0[i];
        out.push((hi - lo) / (2.0 * eps));
    }
    out
}

/// Asserts the analytic gradient matches finite differences within `tol`
/// relative error.
pub fn check_grad_against_fd(
    build: &dyn Fn(&mut Graph, &[f64]) -> (TensorId, TensorId),
    x0: &[f64],
    tol: f64,
) {
    let mut g = Graph::new();
    let (leaf, loss) = build(&mut g, x0);
    assert_eq!(g.numel(loss), 1, "loss must be scalar");
    g.backward(loss).unwrap();
    let analytic = g.grad(leaf).expect("leaf gradient missing").to_vec();
    let numeric = numerical_grad(build, x0, 1e-5);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(1e-6);
        let rel = (a - n).abs() / denom;
        assert!(rel < tol, "grad[{i}]: analytic {a} vs numeric {n} (rel {rel})");
    }
}
