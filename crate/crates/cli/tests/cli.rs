use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "K = 2\nH = 4\nm = 2\nenvs = 2\nn_steps = 5\ntotal_steps = 200\nenc_width = 8\nact_width = 8\nhead_width = 8\n";

fn dpfrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpfrl"))
        .args(args)
        .env_remove("DPFRL_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("cfg.toml");
    fs::write(&p, body).unwrap();
    p.display().to_string()
}

#[test]
fn unknown_command_prints_usage() {
    let out = dpfrl(&["frobnicate"]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("Usage"), "{}", text(&out.stderr));
}

#[test]
fn unknown_flag_prints_usage() {
    let out = dpfrl(&["train", "--learning-rate", "3"]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("Usage"));
}

#[test]
fn missing_config_names_the_path() {
    let out = dpfrl(&["train", "--config", "/nonexistent/dpfrl.toml"]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("/nonexistent/dpfrl.toml"), "{}", text(&out.stderr));
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "variant = \"dvrl\"\n");
    let out = dpfrl(&["train", "--config", &cfg, "--out", dir.path().join("run").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("dpfrl-mean"), "{}", text(&out.stderr));
}

#[test]
fn gradcheck_reports_small_error() {
    let out = dpfrl(&["gradcheck"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let err: f64 = text(&out.stdout).trim().parse().unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn plot_of_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dpfrl(&["plot", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("no metrics found"));
}

#[test]
fn train_eval_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dpfrl"))
        .args(["train", "--config", &cfg, "--out", run_s])
        .env("DPFRL_SEED", "17")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).starts_with("20 updates"), "{}", text(&out.stdout));

    let echo = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echo.contains("seed = 17"), "{echo}");
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 20);

    // the echo is itself a valid config that reproduces the run
    let again = dir.path().join("again");
    let out = dpfrl(&["train", "--config", run.join("config.toml").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(fs::read(run.join("metrics.jsonl")).unwrap(), fs::read(again.join("metrics.jsonl")).unwrap());

    let ck = run.join("checkpoints/final.json");
    let out = dpfrl(&["eval", "--checkpoint", ck.to_str().unwrap(), "--episodes", "3"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).starts_with("3 episodes: mean return"), "{}", text(&out.stdout));

    // a noise length that changes the observation width cannot load these weights
    let out = dpfrl(&["eval", "--checkpoint", ck.to_str().unwrap(), "--episodes", "3", "--noise-len", "5"]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("checkpoint"), "{}", text(&out.stderr));

    let out = dpfrl(&["plot", run_s]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let svg = fs::read_to_string(run.join("curves.svg")).unwrap();
    roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(fs::read_to_string(run.join("curves.csv")).unwrap().lines().count(), 21);
}

#[test]
fn random_policy_eval_needs_no_checkpoint() {
    let out = dpfrl(&["eval", "--random", "--episodes", "4"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).starts_with("4 episodes"));
}

#[test]
fn sweep_dry_run_lists_eighteen_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dpfrl(&["sweep", "--dry-run", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert_eq!(stdout.lines().count(), 18);
    assert!(stdout.lines().all(|l| l.ends_with("Missing")));
    let out = dpfrl(&["ablate", "--dry-run", "--seeds", "4", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(text(&out.stdout).lines().count(), 5);
}

#[test]
fn small_sweep_trains_summarizes_and_skips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("exp");
    let args = [
        "sweep",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--noise-lens",
        "0,1",
        "--seeds",
        "1",
    ];
    let out = dpfrl(&args);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let table = text(&out.stdout);
    assert!(table.contains("dpfrl-K2") && table.contains("gru"), "{table}");
    assert!(out_dir.join("sweep/summary.csv").is_file());
    roxmltree::Document::parse(&fs::read_to_string(out_dir.join("sweep/curves.svg")).unwrap()).unwrap();
    let before = fs::read(out_dir.join("runs/gru-l1-s1/metrics.jsonl")).unwrap();
    let again = dpfrl(&args);
    assert!(again.status.success());
    assert_eq!(text(&again.stdout), table);
    assert_eq!(fs::read(out_dir.join("runs/gru-l1-s1/metrics.jsonl")).unwrap(), before);
}
