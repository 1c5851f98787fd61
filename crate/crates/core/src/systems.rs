//! The three analytic benchmark systems: a nonholonomic particle, a drone
//! chasing a target, and a vertical rolling wheel. Each provides its
//! Lagrangian, constraint 1-forms, a closed-form acceleration oracle and a
//! constraint-satisfying initial-state sampler.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diff::{Scalar, ScalarField};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Generalized coordinates and velocities of an n-degree-of-freedom system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
}

impl State {
    pub fn new(q: Vec<f64>, qd: Vec<f64>) -> Self {
        assert_eq!(q.len(), qd.len());
        State { q, qd }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    /// Flat (q, qd) input vector for scalar fields over the state.
    pub fn flat(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * self.q.len());
        x.extend_from_slice(&self.q);
        x.extend_from_slice(&self.qd);
        x
    }

    pub fn from_flat(x: &[f64]) -> Self {
        let n = x.len() / 2;
        State {
            q: x[..n].to_vec(),
            qd: x[n..].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoordKind {
    Cartesian,
    Angular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Particle,
    Drone,
    Wheel,
}

/// An analytic benchmark system: dimensions, parameters and coordinate kinds.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    kind: Kind,
    name: &'static str,
    n: usize,
    r: usize,
    params: BTreeMap<String, f64>,
    coord_kinds: Vec<CoordKind>,
}

/// Rejection budget for samplers that must avoid singular configurations.
const SAMPLE_ATTEMPTS: usize = 1000;

/// The drone constraint cannot be solved for the dependent velocity when the
/// drone sits on the target's axis; states with |x| below this are resampled.
const DRONE_X_MIN: f64 = 0.1;

impl SystemSpec {
    pub fn particle() -> Self {
        SystemSpec {
            kind: Kind::Particle,
            name: "particle",
            n: 3,
            r: 1,
            params: BTreeMap::from([("m".into(), 1.0)]),
            coord_kinds: vec![CoordKind::Cartesian; 3],
        }
    }

    pub fn drone() -> Self {
        SystemSpec {
            kind: Kind::Drone,
            name: "drone",
            n: 3,
            r: 1,
            params: BTreeMap::from([("m_t".into(), 1.0), ("m_d".into(), 1.0)]),
            coord_kinds: vec![CoordKind::Cartesian; 3],
        }
    }

    pub fn wheel() -> Self {
        SystemSpec {
            kind: Kind::Wheel,
            name: "wheel",
            n: 4,
            r: 2,
            params: BTreeMap::from([
                ("m".into(), 1.0),
                ("I".into(), 0.5),
                ("J".into(), 0.25),
                ("R".into(), 1.0),
            ]),
            coord_kinds: vec![
                CoordKind::Cartesian,
                CoordKind::Cartesian,
                CoordKind::Angular,
                CoordKind::Angular,
            ],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "particle" => Ok(Self::particle()),
            "drone" => Ok(Self::drone()),
            "wheel" => Ok(Self::wheel()),
            other => Err(Error::InvalidArgument(format!(
                "unknown system '{other}' (expected particle, drone or wheel)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    /// Degrees of freedom.
    pub fn dof(&self) -> usize {
        self.n
    }

    /// Constraint rank.
    pub fn rank(&self) -> usize {
        self.r
    }

    pub fn coord_kinds(&self) -> &[CoordKind] {
        &self.coord_kinds
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn set_param(&mut self, key: &str, value: f64) -> Result<()> {
        match self.params.get_mut(key) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(Error::InvalidArgument(format!(
                "system '{}' has no parameter '{key}'",
                self.name
            ))),
        }
    }

    fn param(&self, key: &str) -> f64 {
        self.params[key]
    }

    fn check_dims(&self, q: usize, qd: usize) -> Result<()> {
        if q != self.n || qd != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: q.max(qd),
            });
        }
        Ok(())
    }

    /// Kinetic Lagrangian, generic over the scalar type so it can be
    /// differentiated to any order.
    pub fn lagrangian_generic<S: Scalar>(&self, q: &[S], qd: &[S]) -> S {
        debug_assert_eq!(q.len(), self.n);
        debug_assert_eq!(qd.len(), self.n);
        let half = S::from_f64(0.5);
        match self.kind {
            Kind::Particle => {
                let m = S::from_f64(self.param("m"));
                half * m * (qd[0] * qd[0] + qd[1] * qd[1] + qd[2] * qd[2])
            }
            Kind::Drone => {
                let mt = S::from_f64(self.param("m_t"));
                let md = S::from_f64(self.param("m_d"));
                half * mt * qd[0] * qd[0] + half * md * (qd[1] * qd[1] + qd[2] * qd[2])
            }
            Kind::Wheel => {
                let m = S::from_f64(self.param("m"));
                let i = S::from_f64(self.param("I"));
                let j = S::from_f64(self.param("J"));
                half * m * (qd[0] * qd[0] + qd[1] * qd[1])
                    + half * i * qd[2] * qd[2]
                    + half * j * qd[3] * qd[3]
            }
        }
    }

    /// Lagrangian value at a state.
    pub fn lagrangian(&self, s: &State) -> Result<f64> {
        self.check_dims(s.q.len(), s.qd.len())?;
        Ok(self.lagrangian_generic(&s.q, &s.qd))
    }

    /// Constraint 1-forms: row a is omega^a(q) with Phi^a = omega^a(q) . qd.
    pub fn constraint_forms_generic<S: Scalar>(&self, q: &[S]) -> Vec<Vec<S>> {
        debug_assert_eq!(q.len(), self.n);
        match self.kind {
            // Phi = zd - y xd, omega = (-y, 0, 1)
            Kind::Particle => vec![vec![-q[1], S::zero(), S::one()]],
            // Phi = x yd + (w - y) xd, omega = (0, w - y, x)
            Kind::Drone => vec![vec![S::zero(), q[0] - q[2], q[1]]],
            // Phi1 = xd - R cos(phi) thetad, Phi2 = yd - R sin(phi) thetad
            Kind::Wheel => {
                let r = S::from_f64(self.param("R"));
                let phi = q[3];
                vec![
                    vec![S::one(), S::zero(), -(r * phi.cos()), S::zero()],
                    vec![S::zero(), S::one(), -(r * phi.sin()), S::zero()],
                ]
            }
        }
    }

    /// Constraint 1-form matrix at a position (r rows by n columns).
    pub fn constraint_forms(&self, q: &[f64]) -> Result<Vec<Vec<f64>>> {
        if q.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: q.len(),
            });
        }
        Ok(self.constraint_forms_generic(q))
    }

    /// Constraint values Phi(q, qd) = omega(q) . qd.
    pub fn constraint_values(&self, s: &State) -> Result<Vec<f64>> {
        self.check_dims(s.q.len(), s.qd.len())?;
        let omega = self.constraint_forms_generic(&s.q);
        Ok(omega
            .iter()
            .map(|row| row.iter().zip(&s.qd).map(|(w, qd)| w * qd).sum())
            .collect())
    }

    /// Closed-form constrained acceleration. The state is assumed to satisfy
    /// the constraints; this is not checked here for speed.
    pub fn true_accel(&self, s: &State) -> Vec<f64> {
        debug_assert_eq!(s.q.len(), self.n);
        match self.kind {
            Kind::Particle => {
                let y = s.q[1];
                let (xd, yd) = (s.qd[0], s.qd[1]);
                let c = xd * yd / (1.0 + y * y);
                vec![-c * y, 0.0, c]
            }
            Kind::Drone => {
                let (w, x, y) = (s.q[0], s.q[1], s.q[2]);
                let (wd, xd) = (s.qd[0], s.qd[1]);
                let c = xd * wd / (x * x + (w - y) * (w - y));
                vec![0.0, c * (y - w), -c * x]
            }
            Kind::Wheel => {
                let r = self.param("R");
                let phi = s.q[3];
                let (thetad, phid) = (s.qd[2], s.qd[3]);
                vec![
                    -r * phi.sin() * thetad * phid,
                    r * phi.cos() * thetad * phid,
                    0.0,
                    0.0,
                ]
            }
        }
    }

    /// Draws a constraint-satisfying initial state. Positions are uniform of
    /// width 1 (cartesian) or width pi (angular) centered at 0; free velocity
    /// components are uniform of width 1 and dependent components are solved
    /// exactly from the constraints.
    pub fn sample_initial_state(&self, rng: &mut SplitMix64) -> Result<State> {
        match self.kind {
            Kind::Particle => {
                let q: Vec<f64> = (0..3).map(|_| rng.uniform(-0.5, 0.5)).collect();
                let xd = rng.uniform(-0.5, 0.5);
                let yd = rng.uniform(-0.5, 0.5);
                let zd = q[1] * xd;
                Ok(State::new(q, vec![xd, yd, zd]))
            }
            Kind::Drone => {
                let mut q = None;
                for _ in 0..SAMPLE_ATTEMPTS {
                    let cand: Vec<f64> = (0..3).map(|_| rng.uniform(-0.5, 0.5)).collect();
                    if cand[1].abs() >= DRONE_X_MIN {
                        q = Some(cand);
                        break;
                    }
                }
                let q = q.ok_or_else(|| Error::SamplingExhausted {
                    system: self.name.into(),
                    attempts: SAMPLE_ATTEMPTS,
                })?;
                let wd = rng.uniform(-0.5, 0.5);
                let xd = rng.uniform(-0.5, 0.5);
                let yd = (q[2] - q[0]) * xd / q[1];
                Ok(State::new(q, vec![wd, xd, yd]))
            }
            Kind::Wheel => {
                let r = self.param("R");
                let x = rng.uniform(-0.5, 0.5);
                let y = rng.uniform(-0.5, 0.5);
                let half_pi = std::f64::consts::FRAC_PI_2;
                let theta = rng.uniform(-half_pi, half_pi);
                let phi = rng.uniform(-half_pi, half_pi);
                let thetad = rng.uniform(-0.5, 0.5);
                let phid = rng.uniform(-0.5, 0.5);
                let xd = r * phi.cos() * thetad;
                let yd = r * phi.sin() * thetad;
                Ok(State::new(
                    vec![x, y, theta, phi],
                    vec![xd, yd, thetad, phid],
                ))
            }
        }
    }

    /// Kinetic energy of the true system at a state; since the benchmark
    /// Lagrangians carry no potential this equals the Lagrangian value.
    pub fn true_energy(&self, s: &State) -> f64 {
        self.lagrangian_generic(&s.q, &s.qd)
    }
}

/// Evaluates the analytic Lagrangian on the flat (q, qd) input vector.
impl ScalarField for SystemSpec {
    fn eval<S: Scalar>(&self, x: &[S]) -> S {
        let n = self.n;
        self.lagrangian_generic(&x[..n], &x[n..])
    }
}
