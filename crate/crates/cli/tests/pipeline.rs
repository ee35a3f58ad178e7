use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
name = "cli"
seed = 9
repeats = 2
methods = ["mean", "gbt:raw"]
stage3 = ["geomean"]

[source]
kind = "synthetic"
n_patients = 60
recordings_per_session = { kind = "choice", values = [1.0, 2.0] }

[gbt]
cross_validate = true
[gbt.config]
rounds = 10
depth_grid = [2, 3]

[ann.grid]
depths = [0]

[ann.hyper]
epochs = 20

[sweep]
window_lengths = [60.0, 180.0]
"#;

fn winstack(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_winstack"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = winstack(args, dir);
    assert!(
        out.status.success(),
        "winstack {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn subcommands_chain_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("cfg.toml"), CONFIG).unwrap();
    let data = ["--manifest", "data/manifest.csv", "--outputs", "data/outputs.csv"];
    let with = |head: &[&'static str]| -> Vec<&'static str> {
        let mut v: Vec<&str> = vec!["--config", "cfg.toml"];
        v.extend_from_slice(head);
        v
    };

    ok(&with(&["synth", "--out", "data"]), d);
    assert!(d.join("data/manifest.csv").exists() && d.join("data/outputs.csv").exists());

    let mut args = with(&["train-meta", "--method", "gbt:raw", "--out", "gbt.json"]);
    args.extend(data);
    ok(&args, d);
    let mut args = with(&["train-meta", "--method", "ann:raw", "--out", "ann.json"]);
    args.extend(data);
    ok(&args, d);

    let mut args = with(&["arbitrate", "--model", "gbt.json", "--stage3", "geomean", "--out", "dec.csv"]);
    args.extend(data);
    ok(&args, d);
    assert!(d.join("dec.sessions.csv").exists());
    let mut args = with(&["arbitrate", "--model", "ann.json", "--out", "dec_ann.csv"]);
    args.extend(data);
    ok(&args, d);

    let mut args = with(&["eval", "--decisions", "dec.csv", "--out", "report.json"]);
    args.extend(data);
    let text = ok(&args, d);
    assert!(text.contains("accuracy"), "{text}");
    let report = fs::read_to_string(d.join("report.json")).unwrap();
    assert!(report.contains("\"granularity\""));

    let mut args = with(&["explain", "--model", "gbt.json", "--instances", "3", "--permutations", "50", "--out", "shap"]);
    args.extend(data);
    ok(&args, d);
    assert!(d.join("shap/attributions.csv").exists() && d.join("shap/attribution_summary.json").exists());

    ok(&with(&["experiment", "--out", "run"]), d);
    assert!(d.join("run/manifest.json").exists() && d.join("run/summary.csv").exists());
    assert!(d.join("run/repeat_1/model_gbt_raw.json").exists());

    ok(&with(&["sweep", "--out", "sweep"]), d);
    assert!(d.join("sweep/sweep.csv").exists() && d.join("sweep/L180_S180").is_dir());
}

#[test]
fn seed_flag_and_worker_env_keep_runs_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("cfg.toml"), CONFIG).unwrap();
    ok(&["--config", "cfg.toml", "--seed", "3", "experiment", "--out", "a"], d);
    let out = Command::new(env!("CARGO_BIN_EXE_winstack"))
        .args(["--config", "cfg.toml", "--seed", "3", "experiment", "--out", "b"])
        .current_dir(d)
        .env("WINSTACK_WORKERS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success());
    let summary = |run: &str| fs::read(d.join(run).join("summary.csv")).unwrap();
    assert_eq!(summary("a"), summary("b"));
    ok(&["--config", "cfg.toml", "--seed", "4", "experiment", "--out", "c"], d);
    assert_ne!(fs::read(d.join("a/per_repeat.csv")).unwrap(), fs::read(d.join("c/per_repeat.csv")).unwrap());
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = winstack(&["--config", "missing.toml", "experiment"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));

    fs::write(d.join("bad.toml"), "repeats = 0\n").unwrap();
    let out = winstack(&["--config", "bad.toml", "experiment", "--out", "run"], d);
    assert!(!out.status.success());

    let out = winstack(&["train-meta", "--method", "mean"], d);
    assert!(!out.status.success());
}
