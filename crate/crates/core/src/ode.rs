//! Adaptive Dormand-Prince 5(4) integration of second-order dynamics with
//! 4th-order dense output onto a uniform grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::systems::State;

/// Integrated solution sampled on a uniform time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    /// Accelerations at grid points, filled by callers that need labels.
    pub accels: Option<Vec<Vec<f64>>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

// Butcher tableau of the Dormand-Prince 5(4) pair.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];

const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];

// Difference between the 5th- and 4th-order weights, for the error estimate.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

// Dense output coefficients of the continuous extension.
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;
const BETA: f64 = 0.04;
const H_FLOOR: f64 = 1e-12;
const MAX_STEPS: usize = 20_000_000;

/// First-order right-hand side (qd, accel) assembled from an acceleration
/// field over states.
fn derivative<F>(accel: &F, y: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&State) -> Result<Vec<f64>>,
{
    let n = y.len() / 2;
    let a = accel(&State::from_flat(y))?;
    if a.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: a.len(),
        });
    }
    let mut dy = Vec::with_capacity(2 * n);
    dy.extend_from_slice(&y[n..]);
    dy.extend_from_slice(&a);
    if let Some(i) = dy.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "acceleration field",
            index: Some(i % n),
        });
    }
    Ok(dy)
}

/// One Dormand-Prince step from (t, y) with step h. Returns the 5th-order
/// solution, the scaled error estimate, the new derivative (FSAL) and the
/// stage derivatives needed for dense output.
#[allow(clippy::type_complexity)]
fn dp_step<F>(
    accel: &F,
    y: &[f64],
    k1: &[f64],
    t: f64,
    h: f64,
    rtol: f64,
    atol: f64,
) -> Result<(Vec<f64>, f64, Vec<f64>, [Vec<f64>; 7])>
where
    F: Fn(&State) -> Result<Vec<f64>>,
{
    let dim = y.len();
    let mut k: [Vec<f64>; 7] = Default::default();
    k[0] = k1.to_vec();
    for stage in 1..6 {
        let mut ys = y.to_vec();
        for (j, kj) in k.iter().enumerate().take(stage) {
            let a = A[stage][j];
            if a != 0.0 {
                for i in 0..dim {
                    ys[i] += h * a * kj[i];
                }
            }
        }
        let _ = t + C[stage] * h;
        k[stage] = derivative(accel, &ys)?;
    }
    // 6th stage row doubles as the 5th-order weights (FSAL pair).
    let mut y_new = y.to_vec();
    for (j, kj) in k.iter().enumerate().take(6) {
        let a = A[6][j];
        if a != 0.0 {
            for i in 0..dim {
                y_new[i] += h * a * kj[i];
            }
        }
    }
    k[6] = derivative(accel, &y_new)?;

    let mut err_sq = 0.0;
    for i in 0..dim {
        let mut e = 0.0;
        for (j, kj) in k.iter().enumerate() {
            e += E[j] * kj[i];
        }
        e *= h;
        let scale = atol + rtol * y[i].abs().max(y_new[i].abs());
        let ratio = e / scale;
        err_sq += ratio * ratio;
    }
    let err = (err_sq / dim as f64).sqrt();
    let k_new = k[6].clone();
    Ok((y_new, err, k_new, k))
}

/// Coefficients of the quartic interpolant over one accepted step.
struct DenseSegment {
    t0: f64,
    h: f64,
    cont: [Vec<f64>; 5],
}

impl DenseSegment {
    fn build(y: &[f64], y_new: &[f64], k: &[Vec<f64>; 7], h: f64, t0: f64) -> Self {
        let dim = y.len();
        let mut cont: [Vec<f64>; 5] = Default::default();
        cont[0] = y.to_vec();
        cont[1] = (0..dim).map(|i| y_new[i] - y[i]).collect();
        cont[2] = (0..dim).map(|i| h * k[0][i] - cont[1][i]).collect();
        cont[3] = (0..dim)
            .map(|i| cont[1][i] - h * k[6][i] - cont[2][i])
            .collect();
        cont[4] = (0..dim)
            .map(|i| h * (0..7).map(|j| D[j] * k[j][i]).sum::<f64>())
            .collect();
        DenseSegment { t0, h, cont }
    }

    fn eval(&self, t: f64) -> Vec<f64> {
        let theta = (t - self.t0) / self.h;
        let theta1 = 1.0 - theta;
        (0..self.cont[0].len())
            .map(|i| {
                self.cont[0][i]
                    + theta
                        * (self.cont[1][i]
                            + theta1
                                * (self.cont[2][i]
                                    + theta * (self.cont[3][i] + theta1 * self.cont[4][i])))
            })
            .collect()
    }
}

struct Integration {
    trajectory: Trajectory,
    stalled_at: Option<f64>,
}

fn drive<F>(
    accel: F,
    s0: &State,
    t_span: f64,
    n_out: usize,
    rtol: f64,
    atol: f64,
) -> Result<Integration>
where
    F: Fn(&State) -> Result<Vec<f64>>,
{
    if t_span <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "t_span must be positive, got {t_span}"
        )));
    }
    if n_out < 2 {
        return Err(Error::InvalidArgument(format!(
            "n_out must be at least 2, got {n_out}"
        )));
    }

    let grid: Vec<f64> = (0..n_out)
        .map(|i| t_span * i as f64 / (n_out - 1) as f64)
        .collect();

    let mut y = s0.flat();
    let mut t = 0.0;
    let mut k1 = derivative(&accel, &y)?;

    let mut times = vec![grid[0]];
    let mut states = vec![s0.clone()];
    let mut next_grid = 1;

    let mut h = t_span / 1000.0;
    let mut err_old: f64 = 1e-4;
    let mut steps = 0usize;
    let mut stalled_at = None;

    while next_grid < n_out {
        if steps >= MAX_STEPS {
            stalled_at = Some(t);
            break;
        }
        if h < H_FLOOR {
            stalled_at = Some(t);
            break;
        }
        let h_trial = h.min(t_span - t);
        let step = match dp_step(&accel, &y, &k1, t, h_trial, rtol, atol) {
            Ok(s) => s,
            Err(Error::NonFinite { .. }) | Err(Error::SingularMatrix { .. }) => {
                // Shrink toward the last good point; persistent failure ends
                // in the step-size floor above.
                h = h_trial * 0.25;
                steps += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let (y_new, err, k_new, k) = step;
        steps += 1;

        if err <= 1.0 {
            let t_new = t + h_trial;
            let seg = DenseSegment::build(&y, &y_new, &k, h_trial, t);
            while next_grid < n_out && grid[next_grid] <= t_new + 1e-14 * t_span {
                let tg = grid[next_grid];
                let yg = if next_grid == n_out - 1 && (t_new - t_span).abs() < 1e-12 * t_span {
                    y_new.clone()
                } else {
                    seg.eval(tg)
                };
                times.push(tg);
                states.push(State::from_flat(&yg));
                next_grid += 1;
            }
            // PI step-size controller with memory of the previous error.
            let err_clamped = err.max(1e-16);
            let fac = SAFETY * err_clamped.powf(-0.2 + BETA * 0.75) * err_old.powf(BETA);
            h = h_trial * fac.clamp(FAC_MIN, FAC_MAX);
            err_old = err_clamped;
            t = t_new;
            y = y_new;
            k1 = k_new;
            if t >= t_span {
                break;
            }
        } else {
            let fac = SAFETY * err.powf(-0.2);
            h = h_trial * fac.clamp(FAC_MIN, 1.0);
        }
    }

    Ok(Integration {
        trajectory: Trajectory {
            times,
            states,
            accels: None,
        },
        stalled_at,
    })
}

/// Integrates (q, qd)' = (qd, accel_field) over [0, t_span], reporting the
/// interpolated solution on a uniform grid of `n_out` points.
pub fn integrate<F>(
    accel_field: F,
    s0: &State,
    t_span: f64,
    n_out: usize,
    rtol: f64,
    atol: f64,
) -> Result<Trajectory>
where
    F: Fn(&State) -> Result<Vec<f64>>,
{
    let out = drive(accel_field, s0, t_span, n_out, rtol, atol)?;
    match out.stalled_at {
        Some(t) => Err(Error::StepSizeUnderflow { t_reached: t }),
        None => Ok(out.trajectory),
    }
}

/// Like `integrate`, but a stiffness failure returns the grid points reached
/// so far together with the stall time instead of an error. Used for learned
/// models whose dynamics may become unintegrable.
pub fn integrate_truncating<F>(
    accel_field: F,
    s0: &State,
    t_span: f64,
    n_out: usize,
    rtol: f64,
    atol: f64,
) -> Result<(Trajectory, Option<f64>)>
where
    F: Fn(&State) -> Result<Vec<f64>>,
{
    let out = drive(accel_field, s0, t_span, n_out, rtol, atol)?;
    Ok((out.trajectory, out.stalled_at))
}

/// Raw fixed-step advance used by order-verification tests.
pub fn fixed_step<F>(accel: &F, s0: &State, t_span: f64, n_steps: usize) -> Result<State>
where
    F: Fn(&State) -> Result<Vec<f64>>,
{
    let h = t_span / n_steps as f64;
    let mut y = s0.flat();
    let mut t = 0.0;
    let mut k1 = derivative(accel, &y)?;
    for _ in 0..n_steps {
        let (y_new, _, k_new, _) = dp_step(accel, &y, &k1, t, h, 1.0, 1.0)?;
        y = y_new;
        k1 = k_new;
        t += h;
    }
    Ok(State::from_flat(&y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn free_motion(_: &State) -> Result<Vec<f64>> {
        Ok(vec![0.0])
    }

    fn oscillator(s: &State) -> Result<Vec<f64>> {
        Ok(vec![-s.q[0]])
    }

    #[test]
    fn free_motion_is_exact() {
        let s0 = State::new(vec![0.0], vec![1.0]);
        let traj = integrate(free_motion, &s0, 2.0, 11, 1e-8, 1e-8).unwrap();
        assert_eq!(traj.len(), 11);
        for (t, s) in traj.times.iter().zip(&traj.states) {
            assert!((s.q[0] - t).abs() < 1e-12, "q({t}) = {}", s.q[0]);
            assert!((s.qd[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn oscillator_period_return() {
        let s0 = State::new(vec![1.0], vec![0.0]);
        let t_span = std::f64::consts::TAU;
        let traj = integrate(oscillator, &s0, t_span, 3, 1e-10, 1e-10).unwrap();
        let last = traj.states.last().unwrap();
        assert!((last.q[0] - 1.0).abs() < 1e-7, "q = {}", last.q[0]);
        assert!(last.qd[0].abs() < 1e-7, "qd = {}", last.qd[0]);
    }

    #[test]
    fn dense_output_tracks_cosine() {
        let s0 = State::new(vec![1.0], vec![0.0]);
        let traj = integrate(oscillator, &s0, 10.0, 101, 1e-10, 1e-10).unwrap();
        for (t, s) in traj.times.iter().zip(&traj.states) {
            assert!(
                (s.q[0] - t.cos()).abs() < 1e-7,
                "q({t}) = {} vs {}",
                s.q[0],
                t.cos()
            );
        }
    }

    #[test]
    fn grid_spacing_is_uniform() {
        let s0 = State::new(vec![0.0], vec![1.0]);
        let n = 1000;
        let t_span = 15.0;
        let traj = integrate(free_motion, &s0, t_span, n, 1e-8, 1e-8).unwrap();
        assert_eq!(traj.times[0], 0.0);
        assert_eq!(*traj.times.last().unwrap(), t_span);
        let dt = t_span / (n - 1) as f64;
        for w in traj.times.windows(2) {
            assert!((w[1] - w[0] - dt).abs() < 4.0 * f64::EPSILON * t_span);
        }
    }

    #[test]
    fn fixed_step_order_is_at_least_five() {
        // Global error of the raw step should fall by ~2^5 when halving h;
        // at least 2^4 is required.
        let s0 = State::new(vec![1.0], vec![0.0]);
        let t_span: f64 = 2.0;
        let exact = t_span.cos();
        let coarse = (fixed_step(&oscillator, &s0, t_span, 20).unwrap().q[0] - exact).abs();
        let fine = (fixed_step(&oscillator, &s0, t_span, 40).unwrap().q[0] - exact).abs();
        assert!(
            coarse / fine >= 16.0,
            "order ratio {} too small",
            coarse / fine
        );
    }

    #[test]
    fn tightening_tolerance_reduces_error() {
        let s0 = State::new(vec![1.0], vec![0.0]);
        let t_span = std::f64::consts::TAU;
        let err_at = |tol: f64| {
            let traj = integrate(oscillator, &s0, t_span, 3, tol, tol).unwrap();
            (traj.states.last().unwrap().q[0] - 1.0).abs()
        };
        assert!(err_at(1e-10) < err_at(1e-6));
    }

    #[test]
    fn deterministic_bitwise() {
        let s0 = State::new(vec![1.0], vec![0.3]);
        let a = integrate(oscillator, &s0, 7.0, 50, 1e-9, 1e-9).unwrap();
        let b = integrate(oscillator, &s0, 7.0, 50, 1e-9, 1e-9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stiffness_reports_last_time() {
        // Field blows up at q = 1: 1/(1-q)^2 with q(t) -> 1.
        let blowup = |s: &State| -> Result<Vec<f64>> {
            let d = 1.0 - s.q[0];
            Ok(vec![1.0 / (d * d)])
        };
        let s0 = State::new(vec![0.0], vec![1.0]);
        match integrate(blowup, &s0, 5.0, 11, 1e-8, 1e-8) {
            Err(Error::StepSizeUnderflow { t_reached }) => {
                assert!(t_reached > 0.0 && t_reached < 5.0);
            }
            other => panic!("expected stiffness error, got {other:?}"),
        }
        let (traj, stalled) = integrate_truncating(blowup, &s0, 5.0, 11, 1e-8, 1e-8).unwrap();
        assert!(stalled.is_some());
        assert!(traj.len() >= 1 && traj.len() < 11);
    }

    #[test]
    fn invalid_arguments_rejected() {
        let s0 = State::new(vec![0.0], vec![1.0]);
        assert!(integrate(free_motion, &s0, 0.0, 10, 1e-8, 1e-8).is_err());
        assert!(integrate(free_motion, &s0, 1.0, 1, 1e-8, 1e-8).is_err());
    }
}
