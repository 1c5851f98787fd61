//! Training of the network Lagrangian by stochastic gradient descent on the
//! mean squared acceleration error, through either the unconstrained or the
//! constrained acceleration formula.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::diff::{reverse_gradient, Dual, ParamField, Rev, Scalar};
use crate::dynamics::accel_from_derivs;
use crate::error::{Error, Result};
use crate::linalg::{tri_idx, tri_len, Mat};
use crate::net::batch::{BatchNet, PairSet};
use crate::net::{eval_flat, Params};
use crate::ode::Trajectory;
use crate::rng::{mix_seed, SplitMix64};
use crate::systems::SystemSpec;

/// Which acceleration formula the loss differentiates through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Lnn,
    LnnNh,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Lnn => "lnn",
            Mode::LnnNh => "lnn-nh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lnn" => Ok(Mode::Lnn),
            "lnn-nh" => Ok(Mode::LnnNh),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode '{other}' (expected lnn or lnn-nh)"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub jitter: f64,
    pub seed: u64,
    pub hidden: usize,
}

impl TrainConfig {
    pub fn new(mode: Mode) -> Self {
        TrainConfig {
            mode,
            epochs: 300,
            batch_size: 1000,
            lr0: 1e-3,
            lr_final: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            jitter: 1e-6,
            seed: 0,
            hidden: crate::net::HIDDEN_WIDTH,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    /// Deterministic rendering; wall time is observability metadata and is
    /// deliberately not part of it.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,test_loss,lr\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e}\n",
                e.epoch, e.train_loss, e.test_loss, e.lr
            ));
        }
        out
    }
}

/// One labeled sample: a state and its true acceleration.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub q: &'a [f64],
    pub qd: &'a [f64],
    pub qdd: &'a [f64],
}

/// Second-derivative pairs the acceleration formulas consume: the velocity
/// block and the mixed position-velocity block.
pub(crate) fn needed_pairs(n: usize) -> PairSet {
    let m = 2 * n;
    let mut pairs = Vec::with_capacity(tri_len(n) + n * n);
    for i in 0..n {
        for j in i..n {
            pairs.push((n + i, n + j));
        }
    }
    for i in 0..n {
        for j in 0..n {
            pairs.push((j, n + i));
        }
    }
    PairSet { m, pairs }
}

/// Per-sample constraint data, precomputed once per minibatch since it does
/// not depend on the parameters.
type SampleConstraints = Vec<(Mat<f64>, Vec<f64>)>;

struct MiniBatch {
    /// B x 2n inputs.
    x: Vec<f64>,
    /// B x n true accelerations.
    y: Vec<f64>,
    batch: usize,
    cons: Option<SampleConstraints>,
}

fn assemble_batch(
    sys: &SystemSpec,
    mode: Mode,
    states: &[crate::systems::State],
    accels: &[Vec<f64>],
) -> MiniBatch {
    let n = sys.dof();
    let batch = states.len();
    let mut x = Vec::with_capacity(batch * 2 * n);
    let mut y = Vec::with_capacity(batch * n);
    for (s, a) in states.iter().zip(accels) {
        x.extend_from_slice(&s.q);
        x.extend_from_slice(&s.qd);
        y.extend_from_slice(a);
    }
    let cons = match mode {
        Mode::Lnn => None,
        Mode::LnnNh => Some(
            states
                .iter()
                .map(|s| crate::dynamics::linear_constraint_data(sys, &s.q, &s.qd))
                .collect(),
        ),
    };
    MiniBatch { x, y, batch, cons }
}

fn is_recoverable(e: &Error) -> bool {
    matches!(e, Error::SingularMatrix { .. } | Error::NonFinite { .. })
}

enum StepOutcome {
    Good { loss: f64, grad: Vec<f64> },
    NonFinite,
}

enum LossOutcome {
    Good(f64),
    NonFinite,
}

/// Sum over samples of the squared acceleration error, evaluated from jets
/// already present in the engine. Plain f64; no gradients.
fn term_sum(
    net: &BatchNet,
    mb: &MiniBatch,
    n: usize,
    jitter: f64,
) -> Result<LossOutcome> {
    let m = 2 * n;
    let np = net.pair_set().len();
    let pairs = net.pair_set().pairs.clone();
    let terms: Vec<Result<f64>> = (0..mb.batch)
        .into_par_iter()
        .map(|b| {
            let lg = &net.grad()[b * m..(b + 1) * m];
            let lh = &net.hess()[b * np..(b + 1) * np];
            let qd = &mb.x[b * m + n..(b + 1) * m];
            let truth = &mb.y[b * n..(b + 1) * n];
            let mut h = vec![0.0; tri_len(m)];
            for (k, &(p, q)) in pairs.iter().enumerate() {
                h[tri_idx(m, p, q)] = lh[k];
            }
            let cons = mb
                .cons
                .as_ref()
                .map(|c| (&c[b].0, c[b].1.as_slice()));
            let qdd = accel_from_derivs::<f64>(n, lg, &h, qd, cons, jitter)?;
            let mut term = 0.0;
            for i in 0..n {
                let e = qdd[i] - truth[i];
                term += e * e;
            }
            Ok(term)
        })
        .collect();
    let mut sum = 0.0;
    for t in terms {
        match t {
            Ok(v) if v.is_finite() => sum += v,
            Ok(_) => return Ok(LossOutcome::NonFinite),
            Err(e) if is_recoverable(&e) => return Ok(LossOutcome::NonFinite),
            Err(e) => return Err(e),
        }
    }
    Ok(LossOutcome::Good(sum))
}

/// Loss and parameter gradient for one minibatch: batched bundle forward,
/// per-sample reverse sweep through the acceleration formula, batched reverse
/// sweep through the network.
fn grad_step(
    net: &mut BatchNet,
    theta: &[f64],
    mb: &MiniBatch,
    n: usize,
    jitter: f64,
) -> Result<StepOutcome> {
    let m = 2 * n;
    let np = net.pair_set().len();
    net.forward(theta, &mb.x, mb.batch);
    let pairs = net.pair_set().pairs.clone();

    let per_sample: Vec<Result<(f64, Vec<f64>)>> = (0..mb.batch)
        .into_par_iter()
        .map(|b| {
            let lg = &net.grad()[b * m..(b + 1) * m];
            let lh = &net.hess()[b * np..(b + 1) * np];
            let mut inputs = Vec::with_capacity(m + np);
            inputs.extend_from_slice(lg);
            inputs.extend_from_slice(lh);
            let qd = &mb.x[b * m + n..(b + 1) * m];
            let truth = &mb.y[b * n..(b + 1) * n];
            let cons = mb
                .cons
                .as_ref()
                .map(|c| (&c[b].0, c[b].1.as_slice()));
            reverse_gradient(&inputs, |leaves| {
                let g = &leaves[..m];
                let mut h = vec![Rev::from_f64(0.0); tri_len(m)];
                for (k, &(p, q)) in pairs.iter().enumerate() {
                    h[tri_idx(m, p, q)] = leaves[m + k];
                }
                let qdd = accel_from_derivs::<Rev>(n, g, &h, qd, cons, jitter)?;
                let mut term = Rev::from_f64(0.0);
                for i in 0..n {
                    let e = qdd[i] - Rev::from_f64(truth[i]);
                    term = term + e * e;
                }
                Ok(term)
            })
        })
        .collect();

    let scale = 1.0 / (n * mb.batch) as f64;
    let mut loss = 0.0;
    let mut seed_g = vec![0.0; mb.batch * m];
    let mut seed_h = vec![0.0; mb.batch * np];
    for (b, r) in per_sample.into_iter().enumerate() {
        match r {
            Ok((term, dterm)) => {
                loss += term * scale;
                for j in 0..m {
                    seed_g[b * m + j] = dterm[j] * scale;
                }
                for k in 0..np {
                    seed_h[b * np + k] = dterm[m + k] * scale;
                }
            }
            Err(e) if is_recoverable(&e) => return Ok(StepOutcome::NonFinite),
            Err(e) => return Err(e),
        }
    }
    if !loss.is_finite() {
        return Ok(StepOutcome::NonFinite);
    }
    let seed_v = vec![0.0; mb.batch];
    let grad = net.backward(theta, &seed_v, &seed_g, &seed_h);
    if grad.iter().any(|g| !g.is_finite()) {
        return Ok(StepOutcome::NonFinite);
    }
    Ok(StepOutcome::Good { loss, grad })
}

/// Mean squared acceleration error of a parameter vector over a batch.
pub fn loss_batch(
    p: &Params,
    batch: &[Sample],
    mode: Mode,
    sys: &SystemSpec,
    jitter: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = sys.dof();
    if p.input_dim() != 2 * n {
        return Err(Error::DimensionMismatch {
            expected: 2 * n,
            got: p.input_dim(),
        });
    }
    let states: Vec<crate::systems::State> = batch
        .iter()
        .map(|s| crate::systems::State::new(s.q.to_vec(), s.qd.to_vec()))
        .collect();
    let accels: Vec<Vec<f64>> = batch.iter().map(|s| s.qdd.to_vec()).collect();
    let mb = assemble_batch(sys, mode, &states, &accels);
    let mut net = BatchNet::new(&p.layout, needed_pairs(n))?;
    let theta = p.flatten();
    net.forward(&theta, &mb.x, mb.batch);
    match term_sum(&net, &mb, n, jitter)? {
        LossOutcome::Good(sum) => Ok(sum / (n * mb.batch) as f64),
        LossOutcome::NonFinite => Err(Error::NonFinite {
            context: "loss",
            index: None,
        }),
    }
}

/// Loss with an arbitrary Lagrangian substituted for the network, used to
/// check the loss against the analytic ground truth.
pub fn loss_batch_with<L: crate::dynamics::LagrangianField + Sync>(
    l: &L,
    batch: &[Sample],
    mode: Mode,
    sys: &SystemSpec,
    jitter: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = sys.dof();
    let terms: Vec<Result<f64>> = batch
        .par_iter()
        .map(|s| {
            let mut x = Vec::with_capacity(2 * n);
            x.extend_from_slice(s.q);
            x.extend_from_slice(s.qd);
            let jet = l.jet(&x)?;
            let cons_data;
            let cons = match mode {
                Mode::Lnn => None,
                Mode::LnnNh => {
                    cons_data = crate::dynamics::linear_constraint_data(sys, s.q, s.qd);
                    Some((&cons_data.0, cons_data.1.as_slice()))
                }
            };
            let qdd = accel_from_derivs::<f64>(n, &jet.grad, &jet.hess_upper, s.qd, cons, jitter)?;
            Ok(qdd
                .iter()
                .zip(s.qdd)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>())
        })
        .collect();
    let mut sum = 0.0;
    for t in terms {
        sum += t?;
    }
    Ok(sum / (n * batch.len()) as f64)
}

/// The training loss as a differentiable function of the flat parameter
/// vector; the reference implementation `grad_nested` differentiates. The
/// production path in `train` performs the same computation with batched
/// linear algebra and is tested to agree with this one.
pub struct LossField<'a> {
    pub layout: &'a [usize],
    pub samples: &'a [Sample<'a>],
    pub mode: Mode,
    pub sys: &'a SystemSpec,
    pub jitter: f64,
}

impl ParamField for LossField<'_> {
    fn eval<S: Scalar>(&self, theta: &[S]) -> S {
        let n = self.sys.dof();
        let m = 2 * n;
        let pairs = needed_pairs(n);
        let theta_d: Vec<Dual<S>> = theta.iter().map(|&t| Dual::constant(t)).collect();
        let theta_dd: Vec<Dual<Dual<S>>> = theta
            .iter()
            .map(|&t| Dual::constant(Dual::constant(t)))
            .collect();
        let mut total = S::zero();
        for sample in self.samples {
            let xf: Vec<f64> = sample
                .q
                .iter()
                .chain(sample.qd.iter())
                .copied()
                .collect();
            // gradient of the network in its inputs, one tangent per dim
            let mut g = vec![S::zero(); m];
            for (k, gk) in g.iter_mut().enumerate() {
                let x: Vec<Dual<S>> = xf
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| Dual::new(S::from_f64(v), if i == k { S::one() } else { S::zero() }))
                    .collect();
                *gk = eval_flat(self.layout, &theta_d, &x).du;
            }
            // selected second derivatives via nested tangents
            let mut h = vec![S::zero(); tri_len(m)];
            for &(p, q) in &pairs.pairs {
                let x: Vec<Dual<Dual<S>>> = xf
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| Dual {
                        re: Dual::new(
                            S::from_f64(v),
                            if i == q { S::one() } else { S::zero() },
                        ),
                        du: Dual::new(
                            if i == p { S::one() } else { S::zero() },
                            S::zero(),
                        ),
                    })
                    .collect();
                h[tri_idx(m, p, q)] = eval_flat(self.layout, &theta_dd, &x).du.du;
            }
            let cons_data;
            let cons = match self.mode {
                Mode::Lnn => None,
                Mode::LnnNh => {
                    cons_data =
                        crate::dynamics::linear_constraint_data(self.sys, sample.q, sample.qd);
                    Some((&cons_data.0, cons_data.1.as_slice()))
                }
            };
            let qdd = match accel_from_derivs::<S>(n, &g, &h, sample.qd, cons, self.jitter) {
                Ok(a) => a,
                Err(_) => return S::from_f64(f64::NAN),
            };
            for i in 0..n {
                let e = qdd[i] - S::from_f64(sample.qdd[i]);
                total = total + e * e;
            }
        }
        total / S::from_f64((n * self.samples.len()) as f64)
    }
}

fn epoch_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    if cfg.epochs <= 1 {
        return cfg.lr0;
    }
    let frac = epoch as f64 / (cfg.epochs - 1) as f64;
    cfg.lr0 * (cfg.lr_final / cfg.lr0).powf(frac)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(dim: usize, cfg: &TrainConfig) -> Self {
        Adam {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    fn update(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            theta[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

const MAX_CONSECUTIVE_SKIPS: usize = 10;

/// Offset separating the epoch-shuffle seed stream from trajectory seeds.
const SHUFFLE_STREAM: u64 = 0x51_1d75;

/// Trains the Lagrangian network on the dataset's training split and reports
/// per-epoch losses. Deterministic for a fixed config and dataset,
/// independent of worker count.
pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<(Params, TrainHistory)> {
    let sys = dataset.system()?;
    let n = sys.dof();
    let (train_trajs, test_trajs) = dataset.train_test()?;
    if dataset.meta.n_steps % cfg.batch_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "batch size {} must divide the trajectory length {}",
            cfg.batch_size, dataset.meta.n_steps
        )));
    }

    let layout = [2 * n, cfg.hidden, cfg.hidden, 1];
    let mut params = Params::init_with_layout(&layout, cfg.seed)?;
    params.system = sys.name().to_string();
    params.mode = cfg.mode.as_str().to_string();
    let mut theta = params.flatten();

    let mut net = BatchNet::new(&layout, needed_pairs(n))?;
    let mut adam = Adam::new(theta.len(), cfg);
    let mut history = TrainHistory::default();
    let mut lr_scale = 1.0;
    let mut consecutive_skips = 0usize;

    let chunks_per_traj = dataset.meta.n_steps / cfg.batch_size;

    for epoch in 0..cfg.epochs {
        let started = std::time::Instant::now();
        let lr = epoch_lr(cfg, epoch) * lr_scale;

        let mut order: Vec<usize> = (0..train_trajs.len()).collect();
        let mut shuffle_rng = SplitMix64::new(mix_seed(cfg.seed, SHUFFLE_STREAM + epoch as u64));
        shuffle_rng.shuffle(&mut order);

        let mut epoch_loss_sum = 0.0;
        let mut epoch_loss_count = 0usize;
        for &ti in &order {
            let traj = &train_trajs[ti];
            let accels = traj.accels.as_ref().ok_or_else(|| {
                Error::InvalidArgument("training data must carry accelerations".into())
            })?;
            for c in 0..chunks_per_traj {
                let lo = c * cfg.batch_size;
                let hi = lo + cfg.batch_size;
                let mb = assemble_batch(&sys, cfg.mode, &traj.states[lo..hi], &accels[lo..hi]);
                match grad_step(&mut net, &theta, &mb, n, cfg.jitter)? {
                    StepOutcome::Good { loss, grad } => {
                        adam.update(&mut theta, &grad, lr);
                        epoch_loss_sum += loss;
                        epoch_loss_count += 1;
                        consecutive_skips = 0;
                    }
                    StepOutcome::NonFinite => {
                        lr_scale *= 0.5;
                        consecutive_skips += 1;
                        if consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                            return Err(Error::TrainingDiverged {
                                epoch,
                                skips: consecutive_skips,
                            });
                        }
                    }
                }
            }
        }

        let test_loss = eval_split_loss(&mut net, &theta, &sys, cfg, test_trajs, n)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss: if epoch_loss_count > 0 {
                epoch_loss_sum / epoch_loss_count as f64
            } else {
                f64::NAN
            },
            test_loss,
            lr,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }

    let mut trained = Params::from_flat(&layout, &theta)?;
    trained.seed = cfg.seed;
    trained.system = sys.name().to_string();
    trained.mode = cfg.mode.as_str().to_string();
    Ok((trained, history))
}

fn eval_split_loss(
    net: &mut BatchNet,
    theta: &[f64],
    sys: &SystemSpec,
    cfg: &TrainConfig,
    trajs: &[Trajectory],
    n: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for traj in trajs {
        let accels = traj.accels.as_ref().ok_or_else(|| {
            Error::InvalidArgument("test data must carry accelerations".into())
        })?;
        let mb = assemble_batch(sys, cfg.mode, &traj.states, accels);
        net.forward(theta, &mb.x, mb.batch);
        match term_sum(net, &mb, n, cfg.jitter)? {
            LossOutcome::Good(s) => {
                sum += s;
                count += mb.batch;
            }
            LossOutcome::NonFinite => return Ok(f64::NAN),
        }
    }
    Ok(sum / (n * count) as f64)
}
