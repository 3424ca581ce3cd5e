//! Central finite differences and relative-error helpers.
//!
//! These are the independent oracles used to validate both the tape
//! gradients and the analytic Jacobian assembly. They deliberately
//! know nothing about the tape: they only evaluate a closure at
//! perturbed inputs.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Relative error between two scalars, guarded against tiny
/// denominators.
pub fn rel_err_scalar(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Relative Frobenius error between two same-shaped matrices.
pub fn rel_err_matrix(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "rel_err_matrix",
            left: format!("{}x{}", a.rows(), a.cols()),
            right: format!("{}x{}", b.rows(), b.cols()),
        });
    }
    let diff = a.sub(b)?;
    Ok(diff.norm() / a.norm().max(b.norm()).max(1e-12))
}

/// Jacobian of a vector-valued function by central differences.
///
/// `f` maps an input vector of length `n` to an output vector whose
/// length `m` must be the same for every evaluation. The result is
/// the m-by-n matrix of partials `d f_i / d x_j` at `x`.
pub fn finite_diff_jacobian<F>(mut f: F, x: &[f64], step: f64) -> Result<Matrix>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::InvalidInput(format!(
            "finite difference step must be positive and finite, got {step}"
        )));
    }
    let n = x.len();
    let m = f(x)?.len();
    let mut out = Matrix::zeros(m.max(1), n.max(1));
    if m == 0 || n == 0 {
        return Err(Error::InvalidInput(
            "finite_diff_jacobian requires non-empty input and output".into(),
        ));
    }
    let mut probe = x.to_vec();
    for j in 0..n {
        let orig = probe[j];
        probe[j] = orig + step;
        let plus = f(&probe)?;
        probe[j] = orig - step;
        let minus = f(&probe)?;
        probe[j] = orig;
        if plus.len() != m || minus.len() != m {
            return Err(Error::InvalidInput(
                "function output length changed between evaluations".into(),
            ));
        }
        for i in 0..m {
            out.set(i, j, (plus[i] - minus[i]) / (2.0 * step));
        }
    }
    Ok(out)
}

/// Gradient of a scalar-valued function of a matrix by central
/// differences, one entry at a time.
pub fn finite_diff_gradient<F>(mut f: F, x: &Matrix, step: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::InvalidInput(format!(
            "finite difference step must be positive and finite, got {step}"
        )));
    }
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let orig = probe.get(i, j);
            probe.set(i, j, orig + step);
            let plus = f(&probe)?;
            probe.set(i, j, orig - step);
            let minus = f(&probe)?;
            probe.set(i, j, orig);
            out.set(i, j, (plus - minus) / (2.0 * step));
        }
    }
    Ok(out)
}
