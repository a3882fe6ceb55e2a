use std::path::Path;
use std::process::{Command, Output};

fn adpm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adpm"))
        .args(args)
        .env("ADPM_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn schedule_prints_floor_ratio() {
    let o = adpm(&["schedule", "--counts", "845,52", "--c", "1", "--horizon", "100"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("IR 16 (16.25 exact)"));
}

#[test]
fn schedule_without_counts_is_usage_error() {
    assert_eq!(adpm(&["schedule"]).status.code(), Some(2));
    assert_eq!(adpm(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn infeasible_schedule_is_runtime_error() {
    let o = adpm(&["schedule", "--counts", "845,52"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("infeasible"));
}

#[test]
fn alpha_zero_gives_equal_levels() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = adpm(&["--out", d, "schedule", "--counts", "100,40,7", "--alpha", "0", "--c", "1", "--horizon", "50"]);
    assert!(o.status.success());
    let lam = read(&dir.path().join("lambda.csv"));
    let values: Vec<&str> = lam.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(values.len(), 3);
    assert!(values.iter().all(|v| *v == values[0]));
    let gamma = read(&dir.path().join("gamma.csv"));
    assert_eq!(gamma.lines().count(), 52);
    assert!(dir.path().join("config.json").exists());
}

const SMALL: &[&str] = &["--epochs", "4", "--warmup-epochs", "2", "--horizon", "30", "--sample-steps", "10", "--hidden", "8"];

fn train_into(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["--seed", "3", "--out", dir.to_str().unwrap(), "train"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    adpm(&args)
}

#[test]
fn train_eval_sample_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = train_into(&run, &["--checkpoint-every", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["checkpoint.json", "checkpoint_epoch2.json", "train_log.jsonl", "config.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(read(&run.join("train_log.jsonl")).lines().count(), 4);

    let ck = run.join("checkpoint.json");
    let ev = dir.path().join("eval");
    let o = adpm(&["--seed", "3", "--out", ev.to_str().unwrap(), "eval", "--checkpoint", ck.to_str().unwrap(), "--embeddings"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value = serde_json::from_str(&read(&ev.join("metrics.json"))).unwrap();
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(read(&ev.join("per_class.csv")).lines().count(), 7);
    assert!(read(&ev.join("embeddings.csv")).starts_with("index,label,predicted,y0"));

    let o = adpm(&["--seed", "3", "sample", "--checkpoint", ck.to_str().unwrap(), "--limit", "2", "--trace"]);
    assert!(o.status.success());
    let recs: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let recs = recs.as_array().unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0]["trace"].as_array().unwrap().len(), 11);

    let o = adpm(&["--seed", "3", "eval", "--checkpoint", ck.to_str().unwrap(), "--k", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn same_seed_same_bytes_and_resume_matches() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(train_into(&a, &["--checkpoint-every", "2"]).status.success());
    assert!(train_into(&b, &[]).status.success());
    assert_eq!(read(&a.join("checkpoint.json")), read(&b.join("checkpoint.json")));

    let c = dir.path().join("c");
    let half = a.join("checkpoint_epoch2.json");
    let o = adpm(&["--out", c.to_str().unwrap(), "train", "--resume", half.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(&a.join("checkpoint.json")), read(&c.join("checkpoint.json")));

    let o = adpm(&["--config", c.join("config.json").to_str().unwrap(), "train", "--resume", half.to_str().unwrap(), "--k", "4"]);
    assert_eq!(o.status.code(), Some(2), "resume on other data must be refused");
}

#[test]
fn bound_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = adpm(&["--out", d, "bound", "--trials", "10", "--population", "5000", "--draws", "20"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&read(&dir.path().join("bound.json"))).unwrap();
    assert_eq!(r["trials"].as_u64(), Some(10));
    assert!(r["violation_rate"].as_f64().unwrap() <= 1.0);
    assert_eq!(adpm(&["bound", "--counts", "1,2,3"]).status.code(), Some(2));
}

#[test]
fn sweep_writes_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["--out", dir.path().to_str().unwrap(), "sweep", "--alphas", "0,0.5", "--cs", "1,2"];
    args.extend_from_slice(SMALL);
    let o = adpm(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&dir.path().join("f1.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "alpha,c=1.0,c=2.0");
    let zero: Vec<&str> = lines[1].split(',').skip(1).collect();
    assert_eq!(zero[0], zero[1]);
}
