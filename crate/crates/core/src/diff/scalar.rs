use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Closed set of primitives every differentiable computation in this crate is
/// built from. Implemented by `f64`, by nestable forward duals and by the
/// reverse-mode tape variable, so the same code evaluates values, input
/// derivatives and parameter gradients.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;

    /// Primal value, unwrapped through any derivative payload.
    fn value(self) -> f64;

    /// True only if the primal and every derivative coefficient are finite.
    fn all_finite(self) -> bool;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn softplus(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus, ln(1 + e^x).
pub fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn value(self) -> f64 {
        self
    }

    fn all_finite(self) -> bool {
        self.is_finite()
    }

    fn exp(self) -> Self {
        f64::exp(self)
    }

    fn ln(self) -> Self {
        f64::ln(self)
    }

    fn sin(self) -> Self {
        f64::sin(self)
    }

    fn cos(self) -> Self {
        f64::cos(self)
    }

    fn tanh(self) -> Self {
        f64::tanh(self)
    }

    fn sigmoid(self) -> Self {
        sigmoid_f64(self)
    }

    fn softplus(self) -> Self {
        softplus_f64(self)
    }
}

/// A scalar field evaluable at any `Scalar` type: the object the gradient,
/// Hessian and mixed-derivative operators act on.
pub trait ScalarField {
    fn eval<S: Scalar>(&self, x: &[S]) -> S;
}

/// A scalar function of a parameter vector, the object `grad_nested`
/// differentiates. Its body may call the forward-mode operators and linear
/// solves on values derived from `theta`.
pub trait ParamField {
    fn eval<S: Scalar>(&self, theta: &[S]) -> S;
}
