use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn aim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aim")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(out: &Path, steps: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--seed", "3", "--steps", steps, "--out", path(out)];
    args.extend_from_slice(extra);
    let o = aim(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn train_writes_curves_checkpoint_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    train(&out, "3000", &[]);
    for f in ["curve_total.csv", "curve_r1_end.csv", "curve_r2.csv", "rewards.csv", "checkpoint.json", "summary.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let curve = fs::read_to_string(out.join("curve_total.csv")).unwrap();
    assert!(curve.starts_with("episode,steps,total_reward"));
    assert!(curve.lines().count() > 2);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["seeds"], serde_json::json!([3]));
    assert!(m["code_version"].as_str().unwrap().contains("aim-core"));
    assert_eq!(m["config"]["train"]["max_steps"], 3000);
}

#[test]
fn same_seed_gives_identical_curves() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&a, "2000", &[]);
    train(&b, "2000", &[]);
    for f in ["rewards.csv", "checkpoint.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn resume_continues_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&a, "1500", &["--agent", "tldqn"]);
    let ck = a.join("checkpoint.json");
    train(&b, "1000", &["--agent", "tldqn", "--checkpoint", path(&ck)]);
    assert_eq!(json(&b.join("summary.json"))["steps_trained"], 2500);
    let o = aim(&["train", "--steps", "100", "--agent", "md_dqn", "--checkpoint", path(&ck), "--out", path(&dir.path().join("c"))]);
    assert_eq!(code(&o), 1, "checkpoint of another agent is a config error");
}

fn small_ve_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("ve.json");
    fs::write(&p, r#"{"ve": {"eval_schedules": [24.0, 30.0]}}"#).unwrap();
    p
}

#[test]
fn oracle_and_agent_eval_write_schedule_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_ve_config(dir.path());
    let out = dir.path().join("dp");
    let o = aim(&["eval", "--agent", "dp_oracle", "--config", path(&cfg), "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("x_vs_schedule.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().next().unwrap().contains("x_dp"));
    assert!(json(&out.join("latency.json"))["dp_oracle"].is_object());

    let t = dir.path().join("t");
    train(&t, "1000", &[]);
    let ev = dir.path().join("ev");
    let ck = t.join("checkpoint.json");
    let o = aim(&["eval", "--config", path(&cfg), "--checkpoint", path(&ck), "--out", path(&ev)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&ev.join("report.json"));
    assert_eq!(report["x_values"].as_array().unwrap().len(), 2);
    assert!(json(&ev.join("latency.json"))["agent"].is_object());

    let or = dir.path().join("or");
    let o = aim(&["oracle", "--config", path(&cfg), "--out", path(&or)]);
    assert_eq!(code(&o), 0);
    assert!(or.join("oracle.csv").is_file());
}

#[test]
fn empty_intersection_run_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ie");
    let o = aim(&["eval", "--setup", "ie", "--agent", "heuristic", "--traffic-level", "0", "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&out.join("report.json"));
    assert_eq!(report["vehicles_spawned"], 0);
    assert_eq!(report["collisions"], 0);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
}

#[test]
fn intersection_eval_with_polling_and_fcfs() {
    let dir = tempfile::tempdir().unwrap();
    for sched in ["fcfs", "polling(gated)"] {
        let out = dir.path().join(sched);
        let o = aim(&["eval", "--setup", "ie", "--agent", "heuristic", "--traffic-level", "20", "--scheduler", sched, "--out", path(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let report = json(&out.join("report.json"));
        assert!(report["vehicles_spawned"].as_u64().unwrap() > 0);
        assert!(fs::read_to_string(out.join("schedule_log.csv")).unwrap().lines().count() > 1);
    }
}

fn small_verify_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("verify.json");
    fs::write(
        &p,
        r#"{"verify": {"schedule_instances": 40, "gradient_pairs": 10, "tiny_instances": 5,
            "contraction_pairs": 50, "reduction_transitions": 500}}"#,
    )
    .unwrap();
    p
}

#[test]
fn verify_passes_and_flags_a_bad_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_verify_config(dir.path());
    let out = dir.path().join("ok");
    let o = aim(&["verify", "--config", path(&cfg), "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let report = json(&out.join("verify.json"));
    assert!(report["suites"].as_array().unwrap().iter().all(|s| s["passed"] == true));

    let matrix = dir.path().join("bad.json");
    fs::write(
        &matrix,
        r#"{"queues":[{"road":0,"lane":0,"movement":"straight"},{"road":1,"lane":0,"movement":"straight"}],
            "seconds":[[1.0,-2.0],[2.0,1.0]]}"#,
    )
    .unwrap();
    let out = dir.path().join("bad");
    let o = aim(&["verify", "--config", path(&cfg), "--matrix", path(&matrix), "--out", path(&out)]);
    assert_eq!(code(&o), 2);
    let report = json(&out.join("verify.json"));
    assert!(report["suites"].as_array().unwrap().iter().any(|s| s["passed"] == false));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"agnet": "md_dqn"}"#).unwrap();
    let out = dir.path().join("o");
    for args in [
        vec!["train", "--config", path(&bad)],
        vec!["train", "--agent", "dqn"],
        vec!["train", "--agent", "heuristic"],
        vec!["eval", "--scheduler", "round_robin"],
        vec!["eval", "--agent", "md_dqn"],
        vec!["eval", "--setup", "ie", "--agent", "dp_oracle"],
        vec!["train", "--config", "/nonexistent/config.json"],
    ] {
        let mut args = args;
        args.extend(["--out", path(&out)]);
        let o = aim(&args);
        assert_eq!(code(&o), 1, "{args:?}");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn batch_runs_every_config_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    fs::write(&a, r#"{"agent": "md_dqn", "seeds": [0, 1]}"#).unwrap();
    fs::write(&b, r#"{"agent": "dqn_fixed(0.9)", "seeds": [0]}"#).unwrap();
    let out = dir.path().join("batch");
    let o = aim(&["batch", "--config", path(&a), "--config", path(&b), "--steps", "800", "--threads", "2", "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let results: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(results.as_array().unwrap().len(), 3);
    for run in ["run0_seed0", "run0_seed1", "run1_seed0"] {
        assert!(out.join(run).join("curve_total.csv").is_file(), "{run}");
        assert!(out.join(run).join("manifest.json").is_file(), "{run}");
    }
}
