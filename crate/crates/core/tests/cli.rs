use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use supmer::checkpoint::{read_metrics, Checkpoint};
use supmer::config;
use supmer::metalearn::MetaState;

const SMALL: &str = "\
pipeline.corpus.docs = 80
pipeline.clusters = 4
pipeline.val_fraction = 0.25
support_size = 8
query_size = 8
max_steps = 12
validate_every = 4
shift.shots = 4
shift.validation_per_label = 2
shift.test_per_domain = 20
tune.steps = 10
tune.eval_interval = 5
";

fn supmer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_supmer"))
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .env_remove("SUPMER_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    dir
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = workdir();
    let out = supmer(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = workdir();
    assert_eq!(supmer(dir.path(), &["gen-corpus", "--frob"]).status.code(), Some(2));
    assert_eq!(supmer(dir.path(), &["--seed", "x", "gen-corpus"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = workdir();
    let out = supmer(dir.path(), &["eval", "--checkpoint", "missing.json"]);
    assert_eq!(out.status.code(), Some(1));
    fs::write(dir.path().join("bad.cfg"), "no_such_key = 3\n").unwrap();
    assert_eq!(supmer(dir.path(), &["--config", "bad.cfg", "gen-corpus"]).status.code(), Some(1));
}

#[test]
fn zero_steps_writes_the_initial_parameters() {
    let dir = workdir();
    let out = supmer(
        dir.path(),
        &["--config", "small.cfg", "--seed", "5", "--out", "run", "meta-train", "--max-steps", "0"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = Checkpoint::load(dir.path().join("run/checkpoint.json")).unwrap();
    let state = ckpt.state().unwrap();
    assert_eq!(state.step, 0);

    let mut cfg = config::load(dir.path().join("small.cfg")).unwrap();
    cfg.train.seed = 5;
    cfg.train.max_steps = 0;
    let initial = MetaState::initial(&cfg.train, cfg.pipeline.hidden_dim);
    assert_eq!(state.theta, initial.theta);
    assert_eq!(state.phi, initial.phi);
    assert_eq!(ckpt.config, cfg.train);
    assert!(read_metrics(dir.path().join("run/metrics.jsonl")).unwrap().is_empty());
}

#[test]
fn bench_dg_twice_gives_identical_reports() {
    let dir = workdir();
    for out in ["a", "b"] {
        let o = supmer(
            dir.path(),
            &["--config", "small.cfg", "--seed", "1", "--out", out, "bench-dg", "--num-seeds", "2"],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(dir.path().join("a/bench_report.json")).unwrap();
    let b = fs::read(dir.path().join("b/bench_report.json")).unwrap();
    assert_eq!(a, b);
    let report: supmer::harness::BenchmarkReport = serde_json::from_slice(&a).unwrap();
    assert_eq!(report.seeds, [1, 2]);
    // both methods x both domains x both seeds
    assert_eq!(report.runs.len(), 8);
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = workdir();
    let flag = supmer(dir.path(), &["--seed", "9", "--out", "flag", "gen-corpus"]);
    assert!(flag.status.success());
    let env = Command::new(env!("CARGO_BIN_EXE_supmer"))
        .current_dir(dir.path())
        .env("RUST_LOG", "error")
        .env("SUPMER_SEED", "9")
        .args(["--out", "env", "gen-corpus"])
        .output()
        .unwrap();
    assert!(env.status.success());
    let other = supmer(dir.path(), &["--seed", "10", "--out", "other", "gen-corpus"]);
    assert!(other.status.success());
    let read = |d: &str| fs::read(dir.path().join(d).join("corpus.txt")).unwrap();
    assert_eq!(read("flag"), read("env"));
    assert_ne!(read("flag"), read("other"));
}

#[test]
fn plot_rows_match_the_metrics_stream() {
    let dir = workdir();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", "small.cfg", "--seed", "2", "--out", "run"];
        all.extend_from_slice(args);
        let o = supmer(dir.path(), &all);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["meta-train"]);
    run(&["tune"]);
    run(&["emit-plots", "--metrics", "run/metrics.jsonl", "--report", "run/tune_report.json"]);

    let metrics = read_metrics(dir.path().join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.len(), 12);
    let inner = fs::read_to_string(dir.path().join("run/inner_product.csv")).unwrap();
    let mut lines = inner.lines();
    assert_eq!(lines.next(), Some("step,loss_q,loss_reg,s,b,mean_z,val_loss,val_acc"));
    assert_eq!(lines.count(), metrics.len());

    // vanilla tuning: 10 steps every 5 -> 3 points, for validation + 2 domains
    let acc = fs::read_to_string(dir.path().join("run/accuracy_vs_step.csv")).unwrap();
    let mut lines = acc.lines();
    assert_eq!(lines.next(), Some("method,seed,domain,step,accuracy"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r.starts_with("vanilla,2,")));
}

#[test]
fn resume_continues_where_a_run_stopped() {
    let dir = workdir();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", "small.cfg", "--seed", "4"];
        all.extend_from_slice(args);
        let o = supmer(dir.path(), &all);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["--out", "full", "meta-train"]);
    run(&["--out", "half", "meta-train", "--max-steps", "6"]);
    run(&["--out", "rest", "meta-train", "--max-steps", "6", "--resume", "half/checkpoint.json"]);
    let full = Checkpoint::load(dir.path().join("full/checkpoint.json")).unwrap().state().unwrap();
    let rest = Checkpoint::load(dir.path().join("rest/checkpoint.json")).unwrap().state().unwrap();
    assert_eq!(rest.step, 12);
    assert_eq!(full.theta, rest.theta);
    assert_eq!(full.phi, rest.phi);
}
