//! Forward-mode automatic differentiation with nestable dual payloads, plus a
//! reverse-mode tape for gradients of losses that internally differentiate,
//! factorize and solve. Supplies every derivative operator used by the
//! dynamics formulas and the trainer.

mod dual;
mod scalar;
mod tape;

pub use dual::Dual;
pub use scalar::{sigmoid_f64, softplus_f64, ParamField, Scalar, ScalarField};
pub use tape::{grad_nested, reverse_gradient, Rev};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Gradient of a scalar field at `x`, one tangent pass per input dimension.
pub fn grad<F: ScalarField>(f: &F, x: &[f64]) -> Result<Vec<f64>> {
    grad_in(f, x)
}

/// Gradient over an arbitrary scalar base type; the workhorse behind both
/// `grad` and nested uses inside taped evaluations.
pub fn grad_in<S: Scalar, F: ScalarField>(f: &F, x: &[S]) -> Result<Vec<S>> {
    if x.is_empty() {
        return Err(Error::InvalidArgument(
            "grad needs at least one input dimension".into(),
        ));
    }
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let seeded: Vec<Dual<S>> = x
            .iter()
            .enumerate()
            .map(|(k, &xk)| {
                if k == i {
                    Dual::variable(xk)
                } else {
                    Dual::constant(xk)
                }
            })
            .collect();
        let y = f.eval(&seeded);
        if !y.all_finite() {
            return Err(Error::NonFinite {
                context: "grad",
                index: Some(i),
            });
        }
        out.push(y.du);
    }
    Ok(out)
}

/// Full second-derivative matrix. Every (i, j) entry is evaluated with its
/// own nested seeding, so the returned matrix is symmetric only up to
/// floating-point noise; tests rely on that as an independent consistency
/// check.
pub fn hessian<F: ScalarField>(f: &F, x: &[f64]) -> Result<Mat<f64>> {
    let m = x.len();
    if m == 0 {
        return Err(Error::InvalidArgument(
            "hessian needs at least one input dimension".into(),
        ));
    }
    let mut h = Mat::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            h[(i, j)] = second_partial(f, x, i, j)?;
        }
    }
    Ok(h)
}

/// Block of mixed second derivatives: entry (i, j) = d^2 f / dx[b_j] dx[a_i].
pub fn mixed_second<F: ScalarField>(
    f: &F,
    x: &[f64],
    block_a: std::ops::Range<usize>,
    block_b: std::ops::Range<usize>,
) -> Result<Mat<f64>> {
    for range in [&block_a, &block_b] {
        if range.is_empty() || range.end > x.len() {
            return Err(Error::InvalidArgument(format!(
                "block {range:?} is empty or out of range for {} inputs",
                x.len()
            )));
        }
    }
    if block_a.start < block_b.end && block_b.start < block_a.end {
        return Err(Error::InvalidArgument(format!(
            "blocks {block_a:?} and {block_b:?} overlap"
        )));
    }
    let mut out = Mat::zeros(block_a.len(), block_b.len());
    for (r, i) in block_a.clone().enumerate() {
        for (c, j) in block_b.clone().enumerate() {
            out[(r, c)] = second_partial(f, x, i, j)?;
        }
    }
    Ok(out)
}

fn second_partial<F: ScalarField>(f: &F, x: &[f64], i: usize, j: usize) -> Result<f64> {
    let seeded: Vec<Dual<Dual<f64>>> = x
        .iter()
        .enumerate()
        .map(|(k, &xk)| Dual {
            re: Dual::new(xk, if k == j { 1.0 } else { 0.0 }),
            du: Dual::new(if k == i { 1.0 } else { 0.0 }, 0.0),
        })
        .collect();
    let y = f.eval(&seeded);
    if !y.all_finite() {
        return Err(Error::NonFinite {
            context: "second derivative",
            index: Some(i),
        });
    }
    Ok(y.du.du)
}
