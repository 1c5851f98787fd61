use std::ops::{Add, Div, Mul, Neg, Sub};

use super::scalar::Scalar;

/// Forward-mode dual number with a nestable payload: `Dual<Dual<f64>>` carries
/// second-order coefficients, and the payload type may itself be a tape
/// variable, which is how loss gradients flow through inner Hessians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<S> {
    /// Primal value.
    pub re: S,
    /// Tangent coefficient.
    pub du: S,
}

impl<S: Scalar> Dual<S> {
    pub fn new(re: S, du: S) -> Self {
        Dual { re, du }
    }

    /// Embeds a value with zero tangent.
    pub fn constant(re: S) -> Self {
        Dual {
            re,
            du: S::zero(),
        }
    }

    /// Seeds a variable with unit tangent.
    pub fn variable(re: S) -> Self {
        Dual { re, du: S::one() }
    }
}

impl<S: Scalar> Add for Dual<S> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Dual {
            re: self.re + rhs.re,
            du: self.du + rhs.du,
        }
    }
}

impl<S: Scalar> Sub for Dual<S> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Dual {
            re: self.re - rhs.re,
            du: self.du - rhs.du,
        }
    }
}

impl<S: Scalar> Mul for Dual<S> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Dual {
            re: self.re * rhs.re,
            du: self.du * rhs.re + self.re * rhs.du,
        }
    }
}

impl<S: Scalar> Div for Dual<S> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.re / rhs.re;
        Dual {
            re: q,
            du: (self.du - q * rhs.du) / rhs.re,
        }
    }
}

impl<S: Scalar> Neg for Dual<S> {
    type Output = Self;
    fn neg(self) -> Self {
        Dual {
            re: -self.re,
            du: -self.du,
        }
    }
}

impl<S: Scalar> Scalar for Dual<S> {
    fn from_f64(v: f64) -> Self {
        Dual::constant(S::from_f64(v))
    }

    fn value(self) -> f64 {
        self.re.value()
    }

    fn all_finite(self) -> bool {
        self.re.all_finite() && self.du.all_finite()
    }

    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual {
            re: e,
            du: self.du * e,
        }
    }

    fn ln(self) -> Self {
        Dual {
            re: self.re.ln(),
            du: self.du / self.re,
        }
    }

    fn sin(self) -> Self {
        Dual {
            re: self.re.sin(),
            du: self.du * self.re.cos(),
        }
    }

    fn cos(self) -> Self {
        Dual {
            re: self.re.cos(),
            du: -(self.du * self.re.sin()),
        }
    }

    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual {
            re: t,
            du: self.du * (S::one() - t * t),
        }
    }

    fn sigmoid(self) -> Self {
        let s = self.re.sigmoid();
        Dual {
            re: s,
            du: self.du * s * (S::one() - s),
        }
    }

    fn softplus(self) -> Self {
        Dual {
            re: self.re.softplus(),
            du: self.du * self.re.sigmoid(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_arithmetic_preserved_on_zero_payload() {
        // A dual with zero tangent must reproduce f64 arithmetic bit-for-bit.
        let a = Dual::<f64>::constant(0.1);
        let b = Dual::<f64>::constant(0.7);
        let ops = [
            (a + b).re,
            (a - b).re,
            (a * b).re,
            (a / b).re,
            a.exp().re,
            b.ln().re,
            a.sin().re,
            a.cos().re,
            a.tanh().re,
            a.sigmoid().re,
            a.softplus().re,
        ];
        let raw = [
            0.1 + 0.7,
            0.1 - 0.7,
            0.1 * 0.7,
            0.1 / 0.7,
            0.1_f64.exp(),
            0.7_f64.ln(),
            0.1_f64.sin(),
            0.1_f64.cos(),
            0.1_f64.tanh(),
            crate::diff::sigmoid_f64(0.1),
            crate::diff::softplus_f64(0.1),
        ];
        for (got, want) in ops.iter().zip(raw.iter()) {
            assert_eq!(got.to_bits(), want.to_bits());
        }
        assert_eq!((a * b).du, 0.0);
    }

    #[test]
    fn product_and_chain_rules() {
        // d/dx [x^2 sin(x)] = 2x sin(x) + x^2 cos(x) at x = 1.3
        let x = Dual::<f64>::variable(1.3);
        let y = x * x * x.sin();
        let expect = 2.0 * 1.3 * 1.3_f64.sin() + 1.3 * 1.3 * 1.3_f64.cos();
        assert!((y.du - expect).abs() < 1e-14);
    }

    #[test]
    fn nested_second_derivative() {
        // f(x) = exp(2x), f'' = 4 exp(2x)
        let x0 = 0.4_f64;
        let x: Dual<Dual<f64>> = Dual {
            re: Dual::variable(x0),
            du: Dual::constant(1.0),
        };
        let two = Dual::<Dual<f64>>::from_f64(2.0);
        let y = (two * x).exp();
        assert!((y.du.du - 4.0 * (2.0 * x0).exp()).abs() < 1e-12);
    }

    #[test]
    fn softplus_second_derivative_is_sigma_prime() {
        // softplus''(0) = sigma(0) (1 - sigma(0)) = 0.25
        let x: Dual<Dual<f64>> = Dual {
            re: Dual::variable(0.0),
            du: Dual::constant(1.0),
        };
        let y = x.softplus();
        assert!((y.du.du - 0.25).abs() < 1e-15);
    }
}
