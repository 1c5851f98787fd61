//! Command-line pipeline: dataset generation, training, evaluation and
//! single-trajectory simulation, each run reproducible from its manifest.

mod manifest;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use lnn_core::data::{generate, Dataset};
use lnn_core::net::Params;
use lnn_core::report::report;
use lnn_core::systems::{State, SystemSpec};
use lnn_core::train::{train, Mode, TrainConfig};
use lnn_core::Error as CoreError;

use manifest::RunManifest;

/// Environment variable naming the directory that default output paths are
/// created under.
const OUT_ROOT_ENV: &str = "LNN_OUT_ROOT";

/// Tolerance for accepting user-supplied initial states as
/// constraint-satisfying.
const STATE_PHI_TOL: f64 = 1e-9;

#[derive(Parser)]
#[command(
    name = "lnn",
    version,
    about = "Learn Lagrangians of nonholonomically constrained systems from trajectory data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled ground-truth dataset
    Gen(GenArgs),
    /// Train a Lagrangian network on a dataset
    Train(TrainArgs),
    /// Compare trained models along fresh rollouts
    Eval(EvalArgs),
    /// Integrate one trajectory from a given initial state
    Simulate(SimArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Benchmark system: particle | drone | wheel
    #[arg(long)]
    system: String,
    #[arg(long, default_value_t = 500)]
    trajectories: usize,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 15.0)]
    tspan: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (default: $LNN_OUT_ROOT/data or ./data)
    #[arg(long)]
    out: Option<PathBuf>,
    /// System parameter override, e.g. --param R=2.0 (repeatable)
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training formula: lnn | lnn-nh
    #[arg(long)]
    mode: Option<String>,
    /// Dataset directory produced by `gen`
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Initial learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Minibatch size; must divide the trajectory length
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Regularization added to the learned velocity Hessian
    #[arg(long)]
    jitter: Option<f64>,
    /// Hidden layer width
    #[arg(long)]
    hidden: Option<usize>,
    /// Output parameter file (default: $LNN_OUT_ROOT/params.json)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional key=value configuration file; command-line flags win
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    system: String,
    /// Parameters trained with the unconstrained formula
    #[arg(long)]
    lnn: PathBuf,
    /// Parameters trained with the constrained formula
    #[arg(long = "lnn-nh")]
    lnn_nh: PathBuf,
    /// Number of evaluation trajectories
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 15.0)]
    tspan: f64,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long)]
    jitter: Option<f64>,
    /// Dataset directory; enables true-vs-predicted scatter over its test split
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (default: $LNN_OUT_ROOT/eval)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    system: String,
    /// Use the closed-form ground-truth dynamics
    #[arg(long, conflicts_with_all = ["params", "mode"])]
    analytic: bool,
    /// Trained parameter file
    #[arg(long, requires = "mode")]
    params: Option<PathBuf>,
    /// Formula for the learned model: lnn | lnn-nh
    #[arg(long, requires = "params")]
    mode: Option<String>,
    /// Initial state "q0,q1,...;qd0,qd1,..."
    #[arg(long)]
    state: String,
    #[arg(long, default_value_t = 15.0)]
    tspan: f64,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Output CSV (default: $LNN_OUT_ROOT/traj.csv)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params_sys: Vec<String>,
}

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(run(&argv));
}

/// Exit codes: 0 success, 1 usage error, 2 runtime error.
fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return 1;
        }
    };
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args, argv),
        Command::Train(args) => cmd_train(args, argv),
        Command::Eval(args) => cmd_eval(args, argv),
        Command::Simulate(args) => cmd_simulate(args, argv),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            classify_exit(&e)
        }
    }
}

/// Bad inputs are usage errors; numerical and I/O failures are runtime
/// errors.
fn classify_exit(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            return match core {
                CoreError::InvalidArgument(_)
                | CoreError::DimensionMismatch { .. }
                | CoreError::Format { .. }
                | CoreError::Json(_) => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
    }
    2
}

/// Marker for input mistakes detected outside the core library.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn default_out(name: &str, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(name),
        None => PathBuf::from(name),
    })
}

fn system_with_overrides(name: &str, overrides: &[String]) -> anyhow::Result<SystemSpec> {
    let mut sys = SystemSpec::by_name(name)?;
    for kv in overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--param expects KEY=VALUE, got '{kv}'")))?;
        let value: f64 = value
            .parse()
            .map_err(|_| usage(format!("cannot parse parameter value '{value}'")))?;
        sys.set_param(key, value)?;
    }
    Ok(sys)
}

fn cmd_gen(args: GenArgs, argv: &[String]) -> anyhow::Result<()> {
    let sys = system_with_overrides(&args.system, &args.params)?;
    let out = default_out("data", args.out);
    let dataset = generate(&sys, args.trajectories, args.steps, args.tspan, args.seed)?;
    dataset.save(&out)?;
    let config = serde_json::json!({
        "system": sys.name(),
        "params": sys.params(),
        "trajectories": args.trajectories,
        "steps": args.steps,
        "tspan": args.tspan,
        "seed": args.seed,
        "rtol": lnn_core::data::GEN_RTOL,
        "atol": lnn_core::data::GEN_ATOL,
        "train_trajectories": dataset.meta.train_trajectories,
    });
    RunManifest::new("gen", argv, config, vec![args.seed])
        .output(&out)
        .write_for(&out)?;
    println!(
        "wrote {} trajectories ({} samples) for '{}' to {}",
        args.trajectories,
        dataset.sample_count(),
        sys.name(),
        out.display()
    );
    Ok(())
}

/// Key=value lines; command-line flags take precedence over file entries.
fn parse_config_file(path: &Path) -> anyhow::Result<std::collections::BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let mut map = std::collections::BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {} is not KEY=VALUE: '{line}'", i + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn resolve_opt<T: std::str::FromStr>(
    cli: Option<T>,
    file: Option<&String>,
    key: &str,
) -> anyhow::Result<Option<T>> {
    match (cli, file) {
        (Some(v), _) => Ok(Some(v)),
        (None, Some(raw)) => raw
            .parse::<T>()
            .map(Some)
            .map_err(|_| usage(format!("cannot parse config value '{raw}' for '{key}'"))),
        (None, None) => Ok(None),
    }
}

fn cmd_train(args: TrainArgs, argv: &[String]) -> anyhow::Result<()> {
    let file = match &args.config {
        Some(path) => parse_config_file(path)?,
        None => Default::default(),
    };
    let known = [
        "mode", "data", "epochs", "lr", "batch", "seed", "jitter", "hidden", "out",
    ];
    for key in file.keys() {
        if !known.contains(&key.as_str()) {
            return Err(usage(format!(
                "unknown config key '{key}' (expected one of {})",
                known.join(", ")
            )));
        }
    }

    let mode_str = args
        .mode
        .or_else(|| file.get("mode").cloned())
        .ok_or_else(|| usage("--mode is required (lnn or lnn-nh)"))?;
    let mode = Mode::parse(&mode_str)?;
    let data_dir = args
        .data
        .or_else(|| file.get("data").map(PathBuf::from))
        .ok_or_else(|| usage("--data is required"))?;

    let mut cfg = TrainConfig::new(mode);
    if let Some(v) = resolve_opt(args.epochs, file.get("epochs"), "epochs")? {
        cfg.epochs = v;
    }
    if let Some(v) = resolve_opt(args.lr, file.get("lr"), "lr")? {
        cfg.lr0 = v;
        cfg.lr_final = v / 10.0;
    }
    if let Some(v) = resolve_opt(args.batch, file.get("batch"), "batch")? {
        cfg.batch_size = v;
    }
    if let Some(v) = resolve_opt(args.seed, file.get("seed"), "seed")? {
        cfg.seed = v;
    }
    if let Some(v) = resolve_opt(args.jitter, file.get("jitter"), "jitter")? {
        cfg.jitter = v;
    }
    if let Some(v) = resolve_opt(args.hidden, file.get("hidden"), "hidden")? {
        cfg.hidden = v;
    }
    let out = default_out(
        "params.json",
        args.out.or_else(|| file.get("out").map(PathBuf::from)),
    );

    let dataset = Dataset::load(&data_dir)?;
    let (params, history) = train(&cfg, &dataset)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    params.save(&out)?;
    let history_path = out.with_file_name(format!(
        "{}.history.csv",
        out.file_stem().unwrap_or_default().to_string_lossy()
    ));
    std::fs::write(&history_path, history.to_csv())?;

    let config = serde_json::json!({
        "mode": mode.as_str(),
        "data": data_dir.display().to_string(),
        "epochs": cfg.epochs,
        "batch": cfg.batch_size,
        "lr0": cfg.lr0,
        "lr_final": cfg.lr_final,
        "beta1": cfg.beta1,
        "beta2": cfg.beta2,
        "adam_eps": cfg.adam_eps,
        "jitter": cfg.jitter,
        "seed": cfg.seed,
        "hidden": cfg.hidden,
    });
    RunManifest::new("train", argv, config, vec![cfg.seed])
        .input(&data_dir)
        .output(&out)
        .output(&history_path)
        .write_for(&out)?;

    let last = history.epochs.last();
    println!(
        "trained {} for {} epochs: final train loss {:.3e}, test loss {:.3e}; wrote {}",
        mode,
        cfg.epochs,
        last.map_or(f64::NAN, |e| e.train_loss),
        last.map_or(f64::NAN, |e| e.test_loss),
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs, argv: &[String]) -> anyhow::Result<()> {
    let sys = system_with_overrides(&args.system, &args.params)?;
    let p_lnn = Params::load(&args.lnn)
        .with_context(|| format!("loading --lnn parameters from {}", args.lnn.display()))?;
    let p_nh = Params::load(&args.lnn_nh)
        .with_context(|| format!("loading --lnn-nh parameters from {}", args.lnn_nh.display()))?;
    let dataset = match &args.data {
        Some(dir) => Some(Dataset::load(dir)?),
        None => None,
    };
    let jitter = args.jitter.unwrap_or(1e-6);
    let out = default_out("eval", args.out);
    let outputs = report(
        &p_lnn,
        &p_nh,
        &sys,
        args.n,
        args.seed,
        args.tspan,
        args.steps,
        jitter,
        dataset.as_ref(),
    )?;
    outputs.write(&out)?;

    let config = serde_json::json!({
        "system": sys.name(),
        "params": sys.params(),
        "lnn": args.lnn.display().to_string(),
        "lnn_nh": args.lnn_nh.display().to_string(),
        "n": args.n,
        "seed": args.seed,
        "tspan": args.tspan,
        "steps": args.steps,
        "jitter": jitter,
        "data": args.data.as_ref().map(|d| d.display().to_string()),
    });
    let mut manifest = RunManifest::new("eval", argv, config, vec![args.seed])
        .input(&args.lnn)
        .input(&args.lnn_nh)
        .output(&out);
    if let Some(dir) = &args.data {
        manifest = manifest.input(dir);
    }
    manifest.write_for(&out)?;

    let s = &outputs.report.summary;
    println!(
        "evaluated {} trajectories: mean |Phi| {:.3e} (lnn-nh) vs {:.3e} (lnn); mean rel energy err {:.3e} vs {:.3e}; wrote {}",
        args.n,
        s.lnn_nh.mean_abs_constraint,
        s.lnn.mean_abs_constraint,
        s.lnn_nh.mean_rel_energy_err,
        s.lnn.mean_rel_energy_err,
        out.display()
    );
    Ok(())
}

fn parse_state(spec: &str, n: usize) -> anyhow::Result<State> {
    let parts: Vec<&str> = spec.split(';').collect();
    if parts.len() != 2 {
        return Err(usage(format!(
            "state must be 'q0,...;qd0,...' with one semicolon, got '{spec}'"
        )));
    }
    let parse_side = |side: &str, what: &str| -> anyhow::Result<Vec<f64>> {
        let vals: Result<Vec<f64>, _> = side.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|_| usage(format!("cannot parse {what} '{side}'")))?;
        if vals.len() != n {
            return Err(usage(format!(
                "{what} needs {n} components, got {}",
                vals.len()
            )));
        }
        Ok(vals)
    };
    let q = parse_side(parts[0], "positions")?;
    let qd = parse_side(parts[1], "velocities")?;
    Ok(State::new(q, qd))
}

fn cmd_simulate(args: SimArgs, argv: &[String]) -> anyhow::Result<()> {
    let sys = system_with_overrides(&args.system, &args.params_sys)?;
    let n = sys.dof();
    let s0 = parse_state(&args.state, n)?;

    let phi = sys.constraint_values(&s0)?;
    for (a, value) in phi.iter().enumerate() {
        if value.abs() > STATE_PHI_TOL {
            return Err(usage(format!(
                "initial state violates constraint {a}: Phi^{a}(q, qd) = {value:.3e} (must vanish; \
                 pick velocities satisfying the constraint)"
            )));
        }
    }

    if args.steps < 2 {
        return Err(usage("--steps must be at least 2"));
    }

    let out = default_out("traj.csv", args.out);
    let (traj, accels, source) = if args.analytic {
        let traj = lnn_core::ode::integrate(
            |s| Ok(sys.true_accel(s)),
            &s0,
            args.tspan,
            args.steps,
            lnn_core::data::GEN_RTOL,
            lnn_core::data::GEN_ATOL,
        )?;
        let accels: Vec<Vec<f64>> = traj.states.iter().map(|s| sys.true_accel(s)).collect();
        (traj, accels, "analytic dynamics".to_string())
    } else {
        let params_path = args
            .params
            .as_ref()
            .ok_or_else(|| usage("either --analytic or --params with --mode is required"))?;
        let mode = Mode::parse(args.mode.as_deref().unwrap_or_default())?;
        let p = Params::load(params_path)?;
        if p.input_dim() != 2 * n {
            bail!(CoreError::DimensionMismatch {
                expected: 2 * n,
                got: p.input_dim(),
            });
        }
        let jitter = 1e-6;
        let (traj, stalled) =
            lnn_core::report::rollout(&p, mode, &sys, &s0, args.tspan, args.steps, jitter)?;
        if let Some(t) = stalled {
            return Err(anyhow!(CoreError::StepSizeUnderflow { t_reached: t })
                .context("learned dynamics became unintegrable"));
        }
        let field_accels: Result<Vec<Vec<f64>>, CoreError> = traj
            .states
            .iter()
            .map(|s| {
                let jet = lnn_core::dynamics::LagrangianField::jet(&p, &s.flat())?;
                let cons_data;
                let cons = match mode {
                    Mode::Lnn => None,
                    Mode::LnnNh => {
                        cons_data = lnn_core::dynamics::linear_constraint_data(&sys, &s.q, &s.qd);
                        Some((&cons_data.0, cons_data.1.as_slice()))
                    }
                };
                lnn_core::dynamics::accel_from_derivs::<f64>(
                    n,
                    &jet.grad,
                    &jet.hess_upper,
                    &s.qd,
                    cons,
                    jitter,
                )
            })
            .collect();
        (traj, field_accels?, format!("{mode} model"))
    };

    write_trajectory_csv(&out, &traj, &accels, n)?;
    let config = serde_json::json!({
        "system": sys.name(),
        "params": sys.params(),
        "source": source,
        "state": args.state,
        "tspan": args.tspan,
        "steps": args.steps,
    });
    RunManifest::new("simulate", argv, config, Vec::new())
        .output(&out)
        .write_for(&out)?;
    println!(
        "simulated {} over {} time units ({} grid points) with {source}; wrote {}",
        sys.name(),
        args.tspan,
        traj.len(),
        out.display()
    );
    Ok(())
}

fn write_trajectory_csv(
    out: &Path,
    traj: &lnn_core::Trajectory,
    accels: &[Vec<f64>],
    n: usize,
) -> anyhow::Result<()> {
    use std::io::Write;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
    write!(w, "traj,t")?;
    for axis in ["q", "qd", "qdd"] {
        for i in 0..n {
            write!(w, ",{axis}{i}")?;
        }
    }
    writeln!(w)?;
    for (k, t) in traj.times.iter().enumerate() {
        write!(w, "0,{t:.16e}")?;
        for v in traj.states[k]
            .q
            .iter()
            .chain(&traj.states[k].qd)
            .chain(&accels[k])
        {
            write!(w, ",{v:.16e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
