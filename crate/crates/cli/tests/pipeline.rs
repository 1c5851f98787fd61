//! End-to-end behavior of the `lnn` binary: exit codes, file outputs and
//! configuration precedence.

use std::path::Path;
use std::process::Command;

fn lnn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lnn"))
}

fn run_in(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = lnn()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn full_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stdout, stderr) = run_in(
        dir.path(),
        &[
            "gen",
            "--system",
            "particle",
            "--trajectories",
            "4",
            "--steps",
            "60",
            "--tspan",
            "3",
            "--seed",
            "1",
            "--out",
            "data",
        ],
    );
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("240 samples"));
    assert!(dir.path().join("data/dataset.csv").exists());
    assert!(dir.path().join("data/meta.json").exists());
    assert!(dir.path().join("data/manifest.json").exists());

    for (mode, out) in [("lnn", "lnn.json"), ("lnn-nh", "nh.json")] {
        let (code, _, stderr) = run_in(
            dir.path(),
            &[
                "train", "--mode", mode, "--data", "data", "--epochs", "2", "--batch", "30",
                "--hidden", "8", "--seed", "3", "--out", out,
            ],
        );
        assert_eq!(code, 0, "{stderr}");
        assert!(dir.path().join(out).exists());
    }
    assert!(dir.path().join("lnn.history.csv").exists());
    assert!(dir.path().join("lnn.json.manifest.json").exists());
    let history = std::fs::read_to_string(dir.path().join("lnn.history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,test_loss,lr\n"));
    assert_eq!(history.lines().count(), 3);

    let (code, _, stderr) = run_in(
        dir.path(),
        &[
            "eval", "--system", "particle", "--lnn", "lnn.json", "--lnn-nh", "nh.json", "--n",
            "2", "--seed", "5", "--tspan", "2", "--steps", "40", "--data", "data", "--out",
            "eval",
        ],
    );
    assert_eq!(code, 0, "{stderr}");
    for name in [
        "report.json",
        "manifest.json",
        "traj0_lnn_constraint.csv",
        "traj1_lnn-nh_energy.csv",
        "scatter_lnn.csv",
        "scatter_lnn-nh.csv",
    ] {
        assert!(dir.path().join("eval").join(name).exists(), "missing {name}");
    }

    let (code, _, stderr) = run_in(
        dir.path(),
        &[
            "simulate",
            "--system",
            "particle",
            "--params",
            "nh.json",
            "--mode",
            "lnn-nh",
            "--state",
            "0.1,0.2,0.3;0.4,0.5,0.08",
            "--tspan",
            "1",
            "--steps",
            "11",
            "--out",
            "traj.csv",
        ],
    );
    assert_eq!(code, 0, "{stderr}");
    let text = std::fs::read_to_string(dir.path().join("traj.csv")).unwrap();
    assert!(text.starts_with("traj,t,q0,q1,q2,qd0,qd1,qd2,qdd0,qdd1,qdd2\n"));
    assert_eq!(text.lines().count(), 12);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    // unknown system
    let (code, _, stderr) = run_in(dir.path(), &["gen", "--system", "pendulum"]);
    assert_eq!(code, 1);
    assert!(stderr.contains("unknown system"));
    // unknown mode
    let (code, _, stderr) = run_in(
        dir.path(),
        &["train", "--mode", "vako", "--data", "nowhere"],
    );
    assert_eq!(code, 1);
    assert!(stderr.contains("unknown mode"));
    // malformed state string
    let (code, _, stderr) = run_in(
        dir.path(),
        &[
            "simulate", "--system", "particle", "--analytic", "--state", "1,2,3", "--out", "t.csv",
        ],
    );
    assert_eq!(code, 1);
    assert!(stderr.contains("semicolon"));
    // constraint-violating initial state is rejected with the residual
    let (code, _, stderr) = run_in(
        dir.path(),
        &[
            "simulate",
            "--system",
            "wheel",
            "--analytic",
            "--state",
            "0,0,0,0;1,0,2,1",
            "--out",
            "t.csv",
        ],
    );
    assert_eq!(code, 1);
    assert!(stderr.contains("violates constraint"), "{stderr}");
    // unknown flag via clap
    let (code, _, _) = run_in(dir.path(), &["gen", "--bogus"]);
    assert_eq!(code, 1);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    // missing dataset directory is an I/O failure
    let (code, _, stderr) = run_in(
        dir.path(),
        &["train", "--mode", "lnn", "--data", "missing-dir", "--epochs", "1"],
    );
    assert_eq!(code, 2, "{stderr}");
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stdout, _) = run_in(dir.path(), &["--help"]);
    assert_eq!(code, 0);
    for sub in ["gen", "train", "eval", "simulate"] {
        assert!(stdout.contains(sub));
    }
}

#[test]
fn config_file_with_cli_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, stderr) = run_in(
        dir.path(),
        &[
            "gen", "--system", "particle", "--trajectories", "3", "--steps", "40", "--tspan",
            "2", "--seed", "9", "--out", "data",
        ],
    );
    assert_eq!(code, 0, "{stderr}");
    std::fs::write(
        dir.path().join("train.cfg"),
        "mode=lnn\ndata=data\nepochs=1\nbatch=40\nhidden=8\nseed=2\nout=from_file.json\n",
    )
    .unwrap();
    // flags win over file values: epochs 2 instead of 1
    let (code, _, stderr) = run_in(
        dir.path(),
        &["train", "--config", "train.cfg", "--epochs", "2"],
    );
    assert_eq!(code, 0, "{stderr}");
    let history = std::fs::read_to_string(dir.path().join("from_file.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3, "2 epochs expected: {history}");

    // unknown config keys are rejected
    std::fs::write(dir.path().join("bad.cfg"), "momentum=0.9\n").unwrap();
    let (code, _, stderr) = run_in(dir.path(), &["train", "--config", "bad.cfg"]);
    assert_eq!(code, 1);
    assert!(stderr.contains("unknown config key"));
}

#[test]
fn out_root_env_var_sets_default_paths() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    let out = lnn()
        .current_dir(dir.path())
        .env("LNN_OUT_ROOT", &root)
        .args([
            "gen",
            "--system",
            "particle",
            "--trajectories",
            "2",
            "--steps",
            "20",
            "--tspan",
            "1",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(root.join("data/dataset.csv").exists());
}

#[test]
fn eval_rejects_mismatched_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, stderr) = run_in(
        dir.path(),
        &[
            "gen", "--system", "particle", "--trajectories", "3", "--steps", "30", "--tspan",
            "2", "--seed", "4", "--out", "data",
        ],
    );
    assert_eq!(code, 0, "{stderr}");
    let (code, _, stderr) = run_in(
        dir.path(),
        &[
            "train", "--mode", "lnn", "--data", "data", "--epochs", "1", "--batch", "30",
            "--hidden", "8", "--out", "lnn.json",
        ],
    );
    assert_eq!(code, 0, "{stderr}");
    // passing the lnn parameters in the lnn-nh slot must fail clearly
    let (code, _, stderr) = run_in(
        dir.path(),
        &[
            "eval", "--system", "particle", "--lnn", "lnn.json", "--lnn-nh", "lnn.json",
            "--n", "1", "--steps", "10", "--tspan", "1",
        ],
    );
    assert_eq!(code, 1);
    assert!(stderr.contains("mode"), "{stderr}");
}
