//! Central finite differences used wherever analytic derivatives are absent.

use nalgebra::{DMatrix, DVector};

/// Base step; the per-coordinate step is `max(FD_STEP, FD_STEP * |v_j|)`.
pub const FD_STEP: f64 = 1e-6;

fn step_for(v: f64) -> f64 {
    FD_STEP.max(FD_STEP * v.abs())
}

/// Jacobian of `f` with respect to `v`, one column per coordinate of `v`.
pub fn jacobian<F>(f: F, v: &DVector<f64>, out_dim: usize) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut jac = DMatrix::zeros(out_dim, v.len());
    let mut probe = v.clone();
    for j in 0..v.len() {
        let h = step_for(v[j]);
        probe[j] = v[j] + h;
        let hi = f(&probe);
        probe[j] = v[j] - h;
        let lo = f(&probe);
        probe[j] = v[j];
        jac.set_column(j, &((hi - lo) / (2.0 * h)));
    }
    jac
}

/// Gradient of a scalar function of `v`.
pub fn gradient<F>(f: F, v: &DVector<f64>) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut grad = DVector::zeros(v.len());
    let mut probe = v.clone();
    for j in 0..v.len() {
        let h = step_for(v[j]);
        probe[j] = v[j] + h;
        let hi = f(&probe);
        probe[j] = v[j] - h;
        let lo = f(&probe);
        probe[j] = v[j];
        grad[j] = (hi - lo) / (2.0 * h);
    }
    grad
}
