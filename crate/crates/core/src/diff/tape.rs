use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::scalar::{sigmoid_f64, softplus_f64, ParamField, Scalar};
use crate::error::{Error, Result};

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    weights: [f64; 2],
}

struct Tape {
    nodes: Vec<Node>,
    active: bool,
}

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape { nodes: Vec::new(), active: false });
}

/// Reverse-mode scalar: a value plus an index into the thread-local tape.
/// Constants carry no tape node, so lifting parameters leaves the recording
/// proportional to the differentiable work actually done.
#[derive(Debug, Clone, Copy)]
pub struct Rev {
    v: f64,
    idx: u32,
}

impl Rev {
    fn leaf(v: f64) -> Self {
        let idx = push_node(Node {
            parents: [NONE, NONE],
            weights: [0.0, 0.0],
        });
        Rev { v, idx }
    }

    fn constant(v: f64) -> Self {
        Rev { v, idx: NONE }
    }

    fn unary(self, v: f64, dv: f64) -> Self {
        if self.idx == NONE {
            return Rev::constant(v);
        }
        let idx = push_node(Node {
            parents: [self.idx, NONE],
            weights: [dv, 0.0],
        });
        Rev { v, idx }
    }

    fn binary(self, rhs: Rev, v: f64, dl: f64, dr: f64) -> Self {
        if self.idx == NONE && rhs.idx == NONE {
            return Rev::constant(v);
        }
        let idx = push_node(Node {
            parents: [self.idx, rhs.idx],
            weights: [dl, dr],
        });
        Rev { v, idx }
    }
}

fn push_node(node: Node) -> u32 {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        t.nodes.push(node);
        (t.nodes.len() - 1) as u32
    })
}

impl Add for Rev {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.v + rhs.v, 1.0, 1.0)
    }
}

impl Sub for Rev {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.v - rhs.v, 1.0, -1.0)
    }
}

impl Mul for Rev {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.v * rhs.v, rhs.v, self.v)
    }
}

impl Div for Rev {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.v / rhs.v;
        self.binary(rhs, q, 1.0 / rhs.v, -q / rhs.v)
    }
}

impl Neg for Rev {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.v, -1.0)
    }
}

impl Scalar for Rev {
    fn from_f64(v: f64) -> Self {
        Rev::constant(v)
    }

    fn value(self) -> f64 {
        self.v
    }

    fn all_finite(self) -> bool {
        self.v.is_finite()
    }

    fn exp(self) -> Self {
        let e = self.v.exp();
        self.unary(e, e)
    }

    fn ln(self) -> Self {
        self.unary(self.v.ln(), 1.0 / self.v)
    }

    fn sin(self) -> Self {
        self.unary(self.v.sin(), self.v.cos())
    }

    fn cos(self) -> Self {
        self.unary(self.v.cos(), -self.v.sin())
    }

    fn tanh(self) -> Self {
        let t = self.v.tanh();
        self.unary(t, 1.0 - t * t)
    }

    fn sigmoid(self) -> Self {
        let s = sigmoid_f64(self.v);
        self.unary(s, s * (1.0 - s))
    }

    fn softplus(self) -> Self {
        self.unary(softplus_f64(self.v), sigmoid_f64(self.v))
    }
}

/// Runs `body` over freshly taped leaves for `inputs` and returns the value of
/// the produced output together with d(output)/d(inputs) from one reverse
/// sweep. The tape is confined to the current thread and must not be nested.
pub fn reverse_gradient<F>(inputs: &[f64], body: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&[Rev]) -> Result<Rev>,
{
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        if t.active {
            return Err(Error::TapeInUse);
        }
        t.active = true;
        t.nodes.clear();
        Ok(())
    })?;

    let result = (|| {
        let leaves: Vec<Rev> = inputs.iter().map(|&v| Rev::leaf(v)).collect();
        let out = body(&leaves)?;
        if !out.v.is_finite() {
            return Err(Error::NonFinite {
                context: "reverse-mode output",
                index: None,
            });
        }
        let grads = TAPE.with(|t| {
            let t = t.borrow();
            let mut adjoint = vec![0.0; t.nodes.len()];
            if out.idx != NONE {
                adjoint[out.idx as usize] = 1.0;
                for i in (0..t.nodes.len()).rev() {
                    let a = adjoint[i];
                    if a == 0.0 {
                        continue;
                    }
                    let node = &t.nodes[i];
                    for k in 0..2 {
                        if node.parents[k] != NONE {
                            adjoint[node.parents[k] as usize] += node.weights[k] * a;
                        }
                    }
                }
            }
            leaves.iter().map(|l| adjoint[l.idx as usize]).collect::<Vec<f64>>()
        });
        Ok((out.v, grads))
    })();

    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        t.active = false;
        t.nodes.clear();
    });

    let (v, grads) = result?;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "reverse-mode gradient",
            index: Some(i),
        });
    }
    Ok((v, grads))
}

/// Gradient of a scalar parameter function via one recorded evaluation and a
/// single reverse sweep.
pub fn grad_nested<G: ParamField>(g: &G, theta: &[f64]) -> Result<Vec<f64>> {
    let (_, grads) = reverse_gradient(theta, |leaves| Ok(g.eval::<Rev>(leaves)))?;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_gradient() {
        // f(a, b) = a * b + sin(a)
        let (v, g) = reverse_gradient(&[1.2, 3.4], |x| Ok(x[0] * x[1] + x[0].sin())).unwrap();
        assert!((v - (1.2 * 3.4 + 1.2_f64.sin())).abs() < 1e-15);
        assert!((g[0] - (3.4 + 1.2_f64.cos())).abs() < 1e-15);
        assert!((g[1] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn constants_do_not_grow_gradient() {
        let (_, g) = reverse_gradient(&[2.0], |x| {
            let c = Rev::from_f64(10.0);
            Ok(c * x[0] + c)
        })
        .unwrap();
        assert_eq!(g[0], 10.0);
    }

    #[test]
    fn division_rule() {
        let (_, g) = reverse_gradient(&[3.0, 2.0], |x| Ok(x[0] / x[1])).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15);
        assert!((g[1] + 0.75).abs() < 1e-15);
    }

    #[test]
    fn forward_over_reverse_second_order() {
        use crate::diff::Dual;
        // f(t) = t^3: inner hessian-like dual over a taped variable.
        let (_, g) = reverse_gradient(&[2.0], |x| {
            let t = Dual::<Rev>::variable(x[0]);
            let y = t * t * t;
            // y.du = 3 t^2, so d/dtheta (3 t^2) = 6 t = 12
            Ok(y.du)
        })
        .unwrap();
        assert!((g[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn tape_reuse_after_error() {
        let r = reverse_gradient(&[1.0], |x| Ok(x[0].ln().ln())); // ln(0) = -inf
        assert!(r.is_err());
        // Tape must be usable again afterwards.
        let (_, g) = reverse_gradient(&[2.0], |x| Ok(x[0] * x[0])).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-15);
    }
}
