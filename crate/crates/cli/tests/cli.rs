use std::path::Path;
use std::process::{Command, Output};

fn aepo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aepo"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn verify_passes_and_negative_control_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let ok = aepo(dir.path(), &["verify"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    let text = stdout(&ok);
    let suites = text.lines().filter(|l| l.contains("PASS") || l.contains("FAIL")).count();
    assert!(suites >= 8);
    assert!(text.contains("0 failed"));

    let bad = aepo(dir.path(), &["verify", "--mutate-gradient-factor"]);
    assert_eq!(code(&bad), 3);
    assert!(stdout(&bad).lines().any(|l| l.starts_with("sg_frozen_fd") && l.contains("FAIL")));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&aepo(dir.path(), &["train", "--no_such_key", "1"])), 2);
    assert_eq!(code(&aepo(dir.path(), &["train", "--steps", "many"])), 2);
    assert_eq!(code(&aepo(dir.path(), &["train", "--k", "1"])), 2);
    assert_eq!(code(&aepo(dir.path(), &["train", "--steps"])), 2);
    std::fs::write(dir.path().join("bad.cfg"), "steps = 3\nwat = 1\n").unwrap();
    let o = aepo(dir.path(), &["train", "--config", "bad.cfg"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.cfg:2"));
    assert_eq!(code(&aepo(dir.path(), &["compare", "--rules", "aepo"])), 2);
}

#[test]
fn io_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&aepo(dir.path(), &["diagnose", "missing.jsonl"])), 4);
    assert_eq!(code(&aepo(dir.path(), &["train", "--config", "missing.cfg"])), 4);
    std::fs::write(dir.path().join("bad.jsonl"), "{}\n").unwrap();
    let o = aepo(dir.path(), &["diagnose", "bad.jsonl"]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.jsonl:1"));
}

#[test]
fn later_flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.cfg"),
        "steps = 5\nbatch = 2\nseed = 4\nout_dir = from_file\n",
    )
    .unwrap();
    let o = aepo(dir.path(), &["train", "--config", "run.cfg", "--steps", "2", "--out_dir=run"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("from_file").exists());
    let saved = std::fs::read_to_string(dir.path().join("run/config.txt")).unwrap();
    assert!(saved.contains("steps = 2"));
    assert!(saved.contains("seed = 4"));
    assert!(saved.contains("batch = 2"));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
}

#[test]
fn train_resume_evaluate_and_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["--batch", "2", "--checkpoint_every", "2", "--dump_pools", "true"];
    let mut args = vec!["train", "--steps", "4", "--out_dir", "full"];
    args.extend(base);
    assert_eq!(code(&aepo(dir.path(), &args)), 0);

    let mut args = vec!["train", "--steps", "2", "--out_dir", "part"];
    args.extend(base);
    assert_eq!(code(&aepo(dir.path(), &args)), 0);
    let mut args = vec!["train", "--resume", "part/checkpoints/step_000002", "--steps", "4", "--out_dir", "part"];
    args.extend(base);
    assert_eq!(code(&aepo(dir.path(), &args)), 0);
    assert_eq!(
        std::fs::read(dir.path().join("full/metrics.jsonl")).unwrap(),
        std::fs::read(dir.path().join("part/metrics.jsonl")).unwrap()
    );

    let o = aepo(
        dir.path(),
        &["evaluate", "--checkpoint", "full/checkpoints/step_000004", "--count", "10", "--n", "3"],
    );
    assert_eq!(code(&o), 0);
    let pass: Vec<f64> = stdout(&o)
        .lines()
        .filter_map(|l| l.strip_prefix("pass@"))
        .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(pass.len(), 3);
    assert!(pass.windows(2).all(|w| w[0] <= w[1]));

    let o = aepo(dir.path(), &["diagnose", "full/pools/step_000001.jsonl", "full/pools/step_000002.jsonl"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("pools 4"));
    let o = aepo(dir.path(), &["diagnose", "--json", "full/pools/step_000001.jsonl"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["pools"], 2);

    let o = aepo(dir.path(), &["evaluate", "--checkpoint", "full/checkpoints/step_000004", "--vocab", "30"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn dump_tasks_feeds_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let o = aepo(dir.path(), &["dump-tasks", "--out", "tasks.jsonl", "--count", "5", "--seed", "3"]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(dir.path().join("tasks.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 5);
    for l in text.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["depth"], 2);
        assert_eq!(v["answer"].as_array().unwrap().len(), 1);
    }
    assert_eq!(code(&aepo(dir.path(), &["train", "--steps", "0", "--out_dir", "r"])), 0);
    let o = aepo(
        dir.path(),
        &["evaluate", "--checkpoint", "r/checkpoints/step_000000", "--tasks", "tasks.jsonl", "--n", "2"],
    );
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("tasks 5"));
}

#[test]
fn compare_writes_parseable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = aepo(
        dir.path(),
        &["compare", "--rules", "aepo,grpo", "--csv", "cmp.csv", "--steps", "3", "--batch", "2", "--out_dir", "cmp"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("cmp.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let header = &rows[0];
    assert_eq!(header[0], "step");
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (a, av) = (col("aepo_nonzero_grad_tokens"), col("aepo_vanilla_nonzero_grad_tokens"));
    for r in &rows[1..] {
        assert_eq!(r.len(), header.len());
        for cell in r {
            cell.parse::<f64>().unwrap();
        }
        assert!(r[a].parse::<f64>().unwrap() >= r[av].parse::<f64>().unwrap());
    }
    // Both rules start from the same batch.
    assert_eq!(rows[1][col("aepo_mean_reward")], rows[1][col("grpo_mean_reward")]);
    assert!(dir.path().join("cmp/aepo/metrics.jsonl").exists());
    assert!(dir.path().join("cmp/grpo/metrics.jsonl").exists());
}
