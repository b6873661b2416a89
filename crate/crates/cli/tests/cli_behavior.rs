//! End-to-end checks of the command-line surface: flag layering, artifact
//! echoes, error shape, and the documented example invocations.

use std::path::Path;
use std::process::{Command, Output};

use neco_core::train::{save_checkpoint, TrainConfig, TrainState};
use serde_json::Value;

fn neco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neco"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_lines(out: &Output) -> Vec<String> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(str::to_string)
        .collect()
}

fn json_line(line: &str) -> Value {
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn gen_tiny_data(dir: &Path) -> String {
    let data = dir.join("data").to_string_lossy().into_owned();
    let out = neco(&[
        "gen-data",
        "--out",
        &data,
        "--scenes",
        "8",
        "--val-scenes",
        "4",
        "--seed",
        "11",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

/// Small-model overrides shared by the training invocations below.
const TINY: &[&str] = &[
    "--set",
    "epochs=1",
    "--set",
    "batch_size=4",
    "--set",
    "warm_start_epochs=1",
    "--set",
    "model.dim=16",
    "--set",
    "model.heads=2",
    "--set",
    "model.mlp_hidden=32",
    "--set",
    "model.proj_hidden=32",
    "--set",
    "model.proj_out=8",
    "--set",
    "ref_count=4",
    "--set",
    "aligned_grid=2",
];

#[test]
fn sort_demo_example_snaps_to_the_hard_permutation() {
    let out = neco(&[
        "sort-demo",
        "--values",
        "3,1,2",
        "--beta",
        "1000000",
        "--network",
        "odd_even",
    ]);
    assert!(out.status.success());
    let lines = stdout_lines(&out);
    let result = json_line(lines.last().unwrap());
    let sorted: Vec<f64> = result["sorted"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    for (got, want) in sorted.iter().zip([1.0, 2.0, 3.0]) {
        assert!((got - want).abs() <= 1e-3, "sorted came out {sorted:?}");
    }
    let q = result["q"].as_array().unwrap();
    for row in q {
        let max = row
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .fold(0.0f64, f64::max);
        assert!(max > 0.999, "relaxed permutation is not near-hard: {row}");
    }
}

#[test]
fn eval_on_an_untrained_checkpoint_reports_a_valid_miou() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path());

    let config = TrainConfig {
        epochs: 1,
        batch_size: 4,
        model: neco_core::model::ModelConfig {
            dim: 16,
            heads: 2,
            mlp_hidden: 32,
            proj_hidden: 32,
            proj_out: 8,
            ..Default::default()
        },
        ..TrainConfig::default()
    };
    let state = TrainState::new(config, 2).unwrap();
    let ckpt = dir.path().join("untrained.ckpt");
    save_checkpoint(&ckpt, &state).unwrap();

    let out = neco(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        &data,
        "--protocol",
        "cluster",
        "--K",
        "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = stdout_lines(&out);
    let result = json_line(lines.last().unwrap());
    let miou = result["report"]["mIoU_mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou), "mIoU {miou} outside [0, 1]");
    assert_eq!(result["report"]["k"].as_u64(), Some(4));
    assert_eq!(result["protocol"], "cluster");
    assert!(result["train_config"]["model"]["dim"].as_u64() == Some(16));
}

#[test]
fn same_seed_runs_print_identical_final_loss_lines() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path());
    let run = |out_dir: &str| {
        let mut args = vec!["train", "--data", &data, "--out", out_dir, "--seed", "4"];
        args.extend_from_slice(TINY);
        let out = neco(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        stdout_lines(&out).last().unwrap().clone()
    };
    let a = run(dir.path().join("a").to_str().unwrap());
    let b = run(dir.path().join("b").to_str().unwrap());
    assert_eq!(a, b, "final-loss lines diverged");
    assert!(json_line(&a)["final_loss"].as_f64().unwrap().is_finite());
}

#[test]
fn config_file_applies_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path());
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(
        &cfg_path,
        "# tiny run\nepochs = 1\nseed = 5\nbatch_size = 4\nwarm_start_epochs = 0\n\
         model.dim = 16\nmodel.heads = 2\nmodel.mlp_hidden = 32\nmodel.proj_hidden = 32\n\
         model.proj_out = 8\nref_count = 4\naligned_grid = 2\nloss.top_k = all\n",
    )
    .unwrap();

    let out = neco(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        &data,
        "--seed",
        "7",
        "--set",
        "loss.network_kind=odd_even",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echo = json_line(&stdout_lines(&out)[0]);
    assert_eq!(echo["command"], "train");
    assert_eq!(echo["config"]["seed"].as_u64(), Some(7), "flag must beat file");
    assert_eq!(echo["config"]["epochs"].as_u64(), Some(1));
    assert_eq!(echo["config"]["loss"]["top_k"], Value::Null);
    assert_eq!(echo["config"]["loss"]["network_kind"], "odd_even");
}

#[test]
fn unknown_config_keys_fail_with_a_single_json_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path());
    let out = neco(&["train", "--data", &data, "--set", "epcohs=3"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "stderr must be one line, got: {stderr}");
    let err = json_line(lines[0]);
    assert!(
        err["error"].as_str().unwrap().contains("unknown config key `epcohs`"),
        "error line: {stderr}"
    );
}

#[test]
fn argument_errors_are_also_one_json_line() {
    let out = neco(&["eval", "--protocol", "nonsense", "--checkpoint", "x.ckpt"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "stderr must be one line, got: {stderr}");
    assert!(json_line(lines[0])["error"].as_str().is_some());
}

#[test]
fn run_directory_collects_config_log_report_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_data(dir.path());
    let run_dir = dir.path().join("run");
    let mut args = vec![
        "train",
        "--data",
        &data,
        "--out",
        run_dir.to_str().unwrap(),
        "--seed",
        "2",
        "--threads",
        "1",
    ];
    args.extend_from_slice(TINY);
    let out = neco(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    for name in ["config.json", "train.log", "report.json", "model.ckpt"] {
        assert!(run_dir.join(name).exists(), "{name} missing");
    }
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["config"]["seed"].as_u64(), Some(2));
    assert!(report["report"]["steps_run"].as_u64().unwrap() > 0);

    let log = std::fs::read_to_string(run_dir.join("train.log")).unwrap();
    let first = json_line(log.lines().next().unwrap());
    assert_eq!(first["config"]["seed"].as_u64(), Some(2), "log echoes the config");
}

#[test]
fn gradcheck_command_passes_on_small_sizes() {
    let out = neco(&["gradcheck", "--sizes", "2,4", "--seed", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS"));
    assert!(!text.contains("FAIL"));
}
