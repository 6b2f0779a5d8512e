//! Central finite-difference gradient verification. Backward passes in this
//! crate are hand-written; these helpers recompute any scalar loss under
//! elementwise perturbations so tests can compare analytic gradients against
//! a derivative-free oracle.

use ndarray::{Array1, Array2};

/// Step size tuned for f64 central differences on O(1) activations.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `loss` with respect to a matrix argument.
pub fn fd_grad2(x: &Array2<f64>, mut loss: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut grad = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[(r, c)];
        probe[(r, c)] = orig + FD_STEP;
        let up = loss(&probe);
        probe[(r, c)] = orig - FD_STEP;
        let down = loss(&probe);
        probe[(r, c)] = orig;
        grad[(r, c)] = (up - down) / (2.0 * FD_STEP);
    }
    grad
}

/// Central-difference gradient of `loss` with respect to a vector argument.
pub fn fd_grad1(x: &Array1<f64>, mut loss: impl FnMut(&Array1<f64>) -> f64) -> Array1<f64> {
    let mut grad = Array1::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let up = loss(&probe);
        probe[i] = orig - FD_STEP;
        let down = loss(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * FD_STEP);
    }
    grad
}

/// Relative error with an absolute floor so near-zero pairs compare as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        return 0.0;
    }
    (a - b).abs() / scale
}

pub fn max_rel_err2(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "gradient shapes differ");
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

pub fn max_rel_err1(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient shapes differ");
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}
