//! Equations of motion generated by a differentiable Lagrangian: the
//! unconstrained acceleration solve and the constrained variant that
//! eliminates Lagrange multipliers through the constraint mass matrix. Both
//! are generic over the Lagrangian (analytic or learned) and work for linear
//! constraint 1-forms as well as general velocity-dependent constraints.

use crate::diff::{Dual, Scalar, ScalarField};
use crate::error::{Error, Result};
use crate::linalg::{tri_idx, tri_len, LuFactors, Mat};
use crate::systems::{State, SystemSpec};

/// Value, gradient and packed upper-triangular Hessian of a scalar field at
/// one point: everything the acceleration formulas need from the Lagrangian.
#[derive(Debug, Clone)]
pub struct Jet {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess_upper: Vec<f64>,
}

/// A scalar field that can report its first two derivative orders at a point.
/// The default route seeds nested duals pairwise; implementations with
/// cheaper batched evaluations (the network) override it.
pub trait LagrangianField: ScalarField {
    fn jet(&self, x: &[f64]) -> Result<Jet> {
        jet_via_duals(self, x)
    }
}

pub fn jet_via_duals<F: ScalarField + ?Sized>(f: &F, x: &[f64]) -> Result<Jet> {
    let m = x.len();
    let mut grad = vec![0.0; m];
    let mut hess_upper = vec![0.0; tri_len(m)];
    let value = f.eval(x);
    for i in 0..m {
        for j in i..m {
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
                    context: "lagrangian jet",
                    index: Some(i),
                });
            }
            if i == j {
                grad[i] = y.re.du;
            }
            hess_upper[tri_idx(m, i, j)] = y.du.du;
        }
    }
    Ok(Jet {
        value,
        grad,
        hess_upper,
    })
}

impl LagrangianField for SystemSpec {}

impl<F: ScalarField> ScalarField for &F {
    fn eval<S: Scalar>(&self, x: &[S]) -> S {
        (*self).eval(x)
    }
}

impl<F: LagrangianField> LagrangianField for &F {
    fn jet(&self, x: &[f64]) -> Result<Jet> {
        (*self).jet(x)
    }
}

/// A set of velocity constraints Phi^a(q, qd) = 0. Linear sets expose their
/// 1-forms directly; general sets only need `phi`.
pub trait ConstraintSet {
    fn rank(&self) -> usize;
    fn dof(&self) -> usize;

    /// True when Phi^a = omega^a(q) . qd for 1-forms omega^a.
    fn is_linear(&self) -> bool;

    /// Constraint 1-forms (r rows of length n). Only called when
    /// `is_linear()` holds.
    fn omega<S: Scalar>(&self, q: &[S]) -> Vec<Vec<S>>;

    /// Constraint values; the linear default contracts the 1-forms with qd.
    fn phi<S: Scalar>(&self, q: &[S], qd: &[S]) -> Vec<S> {
        self.omega(q)
            .iter()
            .map(|row| {
                row.iter()
                    .zip(qd)
                    .fold(S::zero(), |acc, (w, &v)| acc + *w * v)
            })
            .collect()
    }
}

impl<C: ConstraintSet> ConstraintSet for &C {
    fn rank(&self) -> usize {
        (*self).rank()
    }
    fn dof(&self) -> usize {
        (*self).dof()
    }
    fn is_linear(&self) -> bool {
        (*self).is_linear()
    }
    fn omega<S: Scalar>(&self, q: &[S]) -> Vec<Vec<S>> {
        (*self).omega(q)
    }
    fn phi<S: Scalar>(&self, q: &[S], qd: &[S]) -> Vec<S> {
        (*self).phi(q, qd)
    }
}

impl ConstraintSet for SystemSpec {
    fn rank(&self) -> usize {
        SystemSpec::rank(self)
    }
    fn dof(&self) -> usize {
        self.dof()
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn omega<S: Scalar>(&self, q: &[S]) -> Vec<Vec<S>> {
        self.constraint_forms_generic(q)
    }
}

/// Unconstrained problems: rank zero.
#[derive(Debug, Clone, Copy)]
pub struct NoConstraints {
    pub dof: usize,
}

impl ConstraintSet for NoConstraints {
    fn rank(&self) -> usize {
        0
    }
    fn dof(&self) -> usize {
        self.dof
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn omega<S: Scalar>(&self, _q: &[S]) -> Vec<Vec<S>> {
        Vec::new()
    }
}

/// Which formula variant evaluates the constraint terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConstraintPath {
    /// Linear 1-form route when available, general route otherwise.
    #[default]
    Auto,
    /// Force the general route through Phi and its gradients.
    Generic,
}

/// A Lagrangian, an optional constraint set and the regularization used on
/// the velocity Hessian before inverting it.
#[derive(Debug, Clone)]
pub struct DynamicsContext<L, C> {
    pub lagrangian: L,
    pub constraints: C,
    pub jitter: f64,
    pub path: ConstraintPath,
}

impl<L: LagrangianField, C: ConstraintSet> DynamicsContext<L, C> {
    pub fn new(lagrangian: L, constraints: C, jitter: f64) -> Self {
        DynamicsContext {
            lagrangian,
            constraints,
            jitter,
            path: ConstraintPath::Auto,
        }
    }

    pub fn with_path(mut self, path: ConstraintPath) -> Self {
        self.path = path;
        self
    }

    fn dof(&self) -> usize {
        self.constraints.dof()
    }

    fn check_state(&self, s: &State) -> Result<()> {
        let n = self.dof();
        if s.q.len() != n || s.qd.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: s.q.len().max(s.qd.len()),
            });
        }
        Ok(())
    }

    fn jet(&self, s: &State) -> Result<Jet> {
        self.lagrangian.jet(&s.flat())
    }

    /// Velocity Hessian of the Lagrangian plus jitter on the diagonal.
    pub fn mass_matrix(&self, s: &State) -> Result<Mat<f64>> {
        self.check_state(s)?;
        let jet = self.jet(s)?;
        Ok(mass_from_jet(self.dof(), &jet, self.jitter))
    }

    /// Force term f = grad_q L - (d^2 L / dq dqd) qd.
    pub fn force(&self, s: &State) -> Result<Vec<f64>> {
        self.check_state(s)?;
        let jet = self.jet(s)?;
        Ok(force_from_jet(self.dof(), &jet, &s.qd))
    }

    /// Accelerations of the unconstrained Euler-Lagrange equations.
    pub fn unconstrained_accel(&self, s: &State) -> Result<Vec<f64>> {
        self.check_state(s)?;
        let jet = self.jet(s)?;
        accel_from_derivs(self.dof(), &jet.grad, &jet.hess_upper, &s.qd, None, self.jitter)
    }

    fn omega_gamma(&self, s: &State) -> Result<(Mat<f64>, Vec<f64>)> {
        let use_linear = match self.path {
            ConstraintPath::Auto => self.constraints.is_linear(),
            ConstraintPath::Generic => false,
        };
        if use_linear {
            Ok(omega_gamma_linear(&self.constraints, &s.q, &s.qd))
        } else {
            omega_gamma_generic(&self.constraints, &s.q, &s.qd)
        }
    }

    /// Constraint mass M^{ab} = grad_qd Phi^a . A^{-1} . grad_qd Phi^b.
    pub fn constraint_mass(&self, s: &State) -> Result<Mat<f64>> {
        self.check_state(s)?;
        if self.constraints.rank() == 0 {
            return Err(Error::InvalidArgument(
                "constraint_mass needs at least one constraint".into(),
            ));
        }
        let jet = self.jet(s)?;
        let a = mass_from_jet(self.dof(), &jet, self.jitter);
        let fact = LuFactors::factor(&a)?;
        let (omega, _) = self.omega_gamma(s)?;
        let y = fact.solve(&omega.transpose())?;
        Ok(omega.matmul(&y))
    }

    /// Lagrange multipliers. A singular constraint mass reports the pivot
    /// index of the dependent constraint row.
    pub fn multipliers(&self, s: &State) -> Result<Vec<f64>> {
        self.check_state(s)?;
        if self.constraints.rank() == 0 {
            return Ok(Vec::new());
        }
        let jet = self.jet(s)?;
        let (omega, gamma) = self.omega_gamma(s)?;
        let parts = constrained_parts(
            self.dof(),
            &jet.grad,
            &jet.hess_upper,
            &s.qd,
            &omega,
            &gamma,
            self.jitter,
        )?;
        Ok(parts.lambda)
    }

    /// Constrained accelerations; with rank zero this reduces exactly to the
    /// unconstrained solve.
    pub fn nh_accel(&self, s: &State) -> Result<Vec<f64>> {
        self.check_state(s)?;
        let jet = self.jet(s)?;
        if self.constraints.rank() == 0 {
            return accel_from_derivs(
                self.dof(),
                &jet.grad,
                &jet.hess_upper,
                &s.qd,
                None,
                self.jitter,
            );
        }
        let (omega, gamma) = self.omega_gamma(s)?;
        accel_from_derivs(
            self.dof(),
            &jet.grad,
            &jet.hess_upper,
            &s.qd,
            Some((&omega, &gamma)),
            self.jitter,
        )
    }

    /// Time derivative of each constraint along an acceleration, used to
    /// check that constrained dynamics keep Phi stationary.
    pub fn constraint_rate(&self, s: &State, qdd: &[f64]) -> Result<Vec<f64>> {
        self.check_state(s)?;
        let (omega, gamma) = self.omega_gamma(s)?;
        let r = omega.rows();
        Ok((0..r)
            .map(|a| {
                gamma[a]
                    + omega
                        .row(a)
                        .iter()
                        .zip(qdd)
                        .map(|(w, acc)| w * acc)
                        .sum::<f64>()
            })
            .collect())
    }
}

fn mass_from_jet(n: usize, jet: &Jet, jitter: f64) -> Mat<f64> {
    let m = 2 * n;
    let mut a = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = jet.hess_upper[tri_idx(m, n + i, n + j)];
        }
        a[(i, i)] += jitter;
    }
    a
}

fn force_from_jet(n: usize, jet: &Jet, qd: &[f64]) -> Vec<f64> {
    let m = 2 * n;
    (0..n)
        .map(|i| {
            let mut f = jet.grad[i];
            for j in 0..n {
                f -= jet.hess_upper[tri_idx(m, j, n + i)] * qd[j];
            }
            f
        })
        .collect()
}

/// Constraint 1-forms and their quadratic velocity term for a linear
/// constraint set at one state, ready to feed `accel_from_derivs`.
pub fn linear_constraint_data<C: ConstraintSet>(c: &C, q: &[f64], qd: &[f64]) -> (Mat<f64>, Vec<f64>) {
    omega_gamma_linear(c, q, qd)
}

/// gamma_a = qd . (grad_q omega^a) . qd for linear 1-forms, one tangent pass
/// per position coordinate.
fn omega_gamma_linear<C: ConstraintSet>(c: &C, q: &[f64], qd: &[f64]) -> (Mat<f64>, Vec<f64>) {
    let n = q.len();
    let r = c.rank();
    let omega_rows = c.omega(q);
    let omega = Mat::from_rows(&omega_rows);
    let mut gamma = vec![0.0; r];
    for j in 0..n {
        let seeded: Vec<Dual<f64>> = q
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                if k == j {
                    Dual::variable(v)
                } else {
                    Dual::constant(v)
                }
            })
            .collect();
        let rows = c.omega(&seeded);
        for a in 0..r {
            for i in 0..n {
                gamma[a] += qd[i] * rows[a][i].du * qd[j];
            }
        }
    }
    (omega, gamma)
}

/// General route: effective 1-forms are grad_qd Phi (velocity-dependent) and
/// gamma_a = grad_q Phi^a . qd.
fn omega_gamma_generic<C: ConstraintSet>(
    c: &C,
    q: &[f64],
    qd: &[f64],
) -> Result<(Mat<f64>, Vec<f64>)> {
    let n = q.len();
    let r = c.rank();
    let mut omega = Mat::zeros(r, n);
    let mut gamma = vec![0.0; r];
    for k in 0..2 * n {
        let qs: Vec<Dual<f64>> = q
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if i == k {
                    Dual::variable(v)
                } else {
                    Dual::constant(v)
                }
            })
            .collect();
        let qds: Vec<Dual<f64>> = qd
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if n + i == k {
                    Dual::variable(v)
                } else {
                    Dual::constant(v)
                }
            })
            .collect();
        let phi = c.phi(&qs, &qds);
        for a in 0..r {
            if !phi[a].all_finite() {
                return Err(Error::NonFinite {
                    context: "constraint gradient",
                    index: Some(k),
                });
            }
            if k < n {
                gamma[a] += phi[a].du * qd[k];
            } else {
                omega[(a, k - n)] = phi[a].du;
            }
        }
    }
    Ok((omega, gamma))
}

struct ConstrainedParts<S> {
    lambda: Vec<S>,
}

fn constrained_parts<S: Scalar>(
    n: usize,
    grad: &[S],
    hess_upper: &[S],
    qd: &[f64],
    omega: &Mat<f64>,
    gamma: &[f64],
    jitter: f64,
) -> Result<ConstrainedParts<S>> {
    let (fact, f) = factor_and_force(n, grad, hess_upper, qd, jitter)?;
    let (lambda, _, _) = solve_multipliers(n, &fact, &f, omega, gamma)?;
    Ok(ConstrainedParts { lambda })
}

fn factor_and_force<S: Scalar>(
    n: usize,
    grad: &[S],
    hess_upper: &[S],
    qd: &[f64],
    jitter: f64,
) -> Result<(LuFactors<S>, Vec<S>)> {
    let m = 2 * n;
    let mut a = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = hess_upper[tri_idx(m, n + i, n + j)];
        }
        a[(i, i)] = a[(i, i)] + S::from_f64(jitter);
    }
    let fact = LuFactors::factor(&a)?;
    let f: Vec<S> = (0..n)
        .map(|i| {
            let mut acc = grad[i];
            for j in 0..n {
                acc = acc - hess_upper[tri_idx(m, j, n + i)] * S::from_f64(qd[j]);
            }
            acc
        })
        .collect();
    Ok((fact, f))
}

/// Solves for the multipliers and returns (lambda, z = A^{-1} f, Y = A^{-1}
/// omega^T); the factorization of A is reused across all three right-hand
/// sides.
#[allow(clippy::type_complexity)]
fn solve_multipliers<S: Scalar>(
    n: usize,
    fact: &LuFactors<S>,
    f: &[S],
    omega: &Mat<f64>,
    gamma: &[f64],
) -> Result<(Vec<S>, Vec<S>, Mat<S>)> {
    let r = omega.rows();
    let z = fact.solve_vec(f)?;
    let mut omega_t = Mat::zeros(n, r);
    for a in 0..r {
        for i in 0..n {
            omega_t[(i, a)] = S::from_f64(omega[(a, i)]);
        }
    }
    let y = fact.solve(&omega_t)?;
    let mut m = Mat::zeros(r, r);
    for a in 0..r {
        for b in 0..r {
            let mut acc = S::zero();
            for i in 0..n {
                acc = acc + S::from_f64(omega[(a, i)]) * y[(i, b)];
            }
            m[(a, b)] = acc;
        }
    }
    let rhs: Vec<S> = (0..r)
        .map(|a| {
            let mut acc = S::from_f64(gamma[a]);
            for i in 0..n {
                acc = acc + S::from_f64(omega[(a, i)]) * z[i];
            }
            acc
        })
        .collect();
    let lambda: Vec<S> = m.solve_vec(&rhs)?.into_iter().map(|v| -v).collect();
    Ok((lambda, z, y))
}

/// The acceleration formula itself, given the Lagrangian's derivatives at one
/// state. Generic over the scalar type so the trainer can differentiate it
/// with respect to the derivative entries; with `None` constraints it is the
/// plain regular-Lagrangian solve.
pub fn accel_from_derivs<S: Scalar>(
    n: usize,
    grad: &[S],
    hess_upper: &[S],
    qd: &[f64],
    constraints: Option<(&Mat<f64>, &[f64])>,
    jitter: f64,
) -> Result<Vec<S>> {
    debug_assert_eq!(grad.len(), 2 * n);
    debug_assert_eq!(hess_upper.len(), tri_len(2 * n));
    let (fact, f) = factor_and_force(n, grad, hess_upper, qd, jitter)?;
    match constraints {
        None => fact.solve_vec(&f),
        Some((omega, _)) if omega.rows() == 0 => fact.solve_vec(&f),
        Some((omega, gamma)) => {
            let (lambda, z, y) = solve_multipliers(n, &fact, &f, omega, gamma)?;
            let r = omega.rows();
            Ok((0..n)
                .map(|i| {
                    let mut acc = z[i];
                    for a in 0..r {
                        acc = acc + y[(i, a)] * lambda[a];
                    }
                    acc
                })
                .collect())
        }
    }
}
