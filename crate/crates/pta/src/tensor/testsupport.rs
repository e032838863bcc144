//! Finite-difference gradient oracle shared by unit tests across modules.
//! Kept independent of the backward pass it checks: probes use detached
//! constant tensors and re-run the forward function.

use super::{Graph, Tensor};

/// Central finite differences of a scalar-valued function of one leaf.
pub(crate) fn finite_difference(
    shape: &[usize],
    data: &[f64],
    f: &dyn Fn(&Tensor) -> Tensor,
) -> Vec<f64> {
    let h = 1e-5;
    let mut grad = vec![0.0; data.len()];
    for i in 0..data.len() {
        let mut plus = data.to_vec();
        let mut minus = data.to_vec();
        plus[i] += h;
        minus[i] -= h;
        let fp = f(&Tensor::constant(shape.to_vec(), plus)).item();
        let fm = f(&Tensor::constant(shape.to_vec(), minus)).item();
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

pub(crate) fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

pub(crate) fn assert_grad_matches_fd(shape: &[usize], data: &[f64], f: &dyn Fn(&Tensor) -> Tensor) {
    let g = Graph::new();
    let x = g.leaf(shape.to_vec(), data.to_vec());
    let loss = f(&x);
    let grads = loss.backward().unwrap();
    let analytic = grads.wrt(&x).expect("leaf should receive a gradient");
    let numeric = finite_difference(shape, data, f);
    let rel = max_relative_error(analytic, &numeric);
    assert!(
        rel <= 1e-4,
        "gradient mismatch: max relative error {rel:.3e}\nanalytic {analytic:?}\nnumeric  {numeric:?}"
    );
}
