//! Acceptance criterion 7: the full pipeline is deterministic. Two identical
//! gen -> train -> eval runs produce byte-identical report.json, and the
//! result does not depend on the number of worker threads.

use std::path::Path;
use std::process::Command;

fn run_pipeline(dir: &Path, threads: &str) {
    let bin = env!("CARGO_BIN_EXE_lnn");
    let steps: &[&[&str]] = &[
        &[
            "gen", "--system", "particle", "--trajectories", "6", "--steps", "80", "--tspan",
            "4", "--seed", "11", "--out", "data",
        ],
        &[
            "train", "--mode", "lnn", "--data", "data", "--epochs", "2", "--batch", "40",
            "--hidden", "16", "--seed", "21", "--out", "lnn.json",
        ],
        &[
            "train", "--mode", "lnn-nh", "--data", "data", "--epochs", "2", "--batch", "40",
            "--hidden", "16", "--seed", "21", "--out", "nh.json",
        ],
        &[
            "eval", "--system", "particle", "--lnn", "lnn.json", "--lnn-nh", "nh.json", "--n",
            "3", "--seed", "31", "--tspan", "3", "--steps", "60", "--data", "data", "--out",
            "eval",
        ],
    ];
    for args in steps {
        let out = Command::new(bin)
            .current_dir(dir)
            .env("RAYON_NUM_THREADS", threads)
            .args(*args)
            .output()
            .expect("binary runs");
        assert_eq!(
            out.status.code(),
            Some(0),
            "step {:?} failed: {}",
            args[0],
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn criterion_7_pipeline_determinism() {
    let base = tempfile::tempdir().unwrap();
    let runs = [("a", "1"), ("b", "1"), ("c", "4")];
    for (name, threads) in runs {
        let dir = base.path().join(name);
        std::fs::create_dir_all(&dir).unwrap();
        run_pipeline(&dir, threads);
    }
    let read = |name: &str, file: &str| std::fs::read(base.path().join(name).join(file)).unwrap();

    let mut identical = true;
    for file in [
        "eval/report.json",
        "data/dataset.csv",
        "lnn.json",
        "nh.json",
        "lnn.history.csv",
        "nh.history.csv",
        "eval/traj0_lnn_constraint.csv",
        "eval/scatter_lnn-nh.csv",
    ] {
        let a = read("a", file);
        identical &= a == read("b", file) && a == read("c", file);
        assert!(identical, "{file} differs between runs");
    }
    println!(
        "[{}] criterion 7 (pipeline determinism): report.json and all artifacts byte-identical across repeated runs and 1 vs 4 worker threads",
        if identical { "PASS" } else { "FAIL" }
    );
    assert!(identical);
}
