//! End-to-end runs of the `outcome-align` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use outcome_align::synthcohort::{read_cohort, write_cohort, Cohort};
use outcome_align::trainkit::{load_checkpoint, predict_cohort};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_outcome-align"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(p: &Path) -> Value {
    let mut m = p.as_os_str().to_owned();
    m.push(".manifest.json");
    serde_json::from_str(&std::fs::read_to_string(PathBuf::from(m)).unwrap()).unwrap()
}

/// A small cohort split into `train`/`val`/`test` files inside a temp dir.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("c.jsonl");
        let res = run(&["generate", "--n", "300", "--seed", "3", "--split", "0.6,0.2,0.2", "--out", s(&out)]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, tag: &str, extra: &[&str]) -> (Output, PathBuf) {
        let ck = self.path(&format!("{tag}.ckpt.json"));
        let hist = self.path(&format!("{tag}.history.jsonl"));
        let train = self.path("c.train.jsonl");
        let val = self.path("c.val.jsonl");
        let mut args = vec![
            "train", "--cohort", s(&train), "--val", s(&val), "--checkpoint", s(&ck), "--history", s(&hist),
            "--epochs", "2",
        ];
        args.extend_from_slice(extra);
        (run(&args), ck)
    }
}

#[test]
fn generate_is_deterministic_and_writes_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for p in [&a, &b] {
        let out = run(&["generate", "--n", "50", "--out", s(p)]);
        assert_eq!(code(&out), 0);
        assert!(stdout(&out).contains("n=50"));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let m = manifest(&a);
    assert_eq!(m["command"], "generate");
    assert!(m["tool_version"].as_str().unwrap().starts_with("outcome-align"));
    assert!(m["duration_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn generate_split_writes_three_parts() {
    let fx = Fixture::new();
    let sizes: Vec<usize> = ["train", "val", "test"]
        .iter()
        .map(|p| read_cohort(fx.path(&format!("c.{p}.jsonl"))).unwrap().len())
        .collect();
    assert_eq!(sizes, vec![180, 60, 60]);
}

#[test]
fn usage_errors_exit_two_and_name_the_flag() {
    assert_eq!(code(&run(&["generate", "--n", "10"])), 2);
    let out = run(&["generate", "--prevalence", "1.5", "--out", "/tmp/never.jsonl"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--prevalence"), "{}", stderr(&out));
    assert_eq!(code(&run(&["no-such-command"])), 2);
    let out = run(&["eval", "--cohort", "/nonexistent/c.jsonl", "--checkpoint", "/nonexistent/k", "--out", "/tmp/x"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("/nonexistent/c.jsonl"));
}

#[test]
fn train_records_input_digests_and_is_reproducible() {
    let fx = Fixture::new();
    let (out, ck) = fx.train("a", &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("epoch=")).count(), 2);

    let m = manifest(&ck);
    for (i, name) in ["c.train.jsonl", "c.val.jsonl"].iter().enumerate() {
        let bytes = std::fs::read(fx.path(name)).unwrap();
        assert_eq!(m["inputs"][i]["sha256"], hex::encode(Sha256::digest(&bytes)));
    }
    assert!(fx.path("a.history.jsonl.manifest.json").exists());

    let (_, ck2) = fx.train("b", &[]);
    assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(&ck2).unwrap());
    assert_eq!(
        std::fs::read(fx.path("a.history.jsonl")).unwrap(),
        std::fs::read(fx.path("b.history.jsonl")).unwrap()
    );
}

#[test]
fn lambda_zero_matches_disabled_regularizer() {
    let fx = Fixture::new();
    let (a, ck_a) = fx.train("zero", &["--lambda", "0"]);
    let (b, ck_b) = fx.train("off", &["--no-regularizer"]);
    assert_eq!((code(&a), code(&b)), (0, 0));
    assert_eq!(std::fs::read(ck_a).unwrap(), std::fs::read(ck_b).unwrap());
}

#[test]
fn eval_reports_metrics_and_single_bin_calibration() {
    let fx = Fixture::new();
    let (_, ck) = fx.train("m", &[]);
    let test = fx.path("c.test.jsonl");
    let report = fx.path("report.json");
    let out = run(&["eval", "--cohort", s(&test), "--checkpoint", s(&ck), "--bins", "1", "--out", s(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for key in ["auroc=", "auprc=", "brier=", "ece=", "rayleigh=", "mahalanobis_sq="] {
        assert!(stdout(&out).contains(key), "missing {key}");
    }
    let json: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let cohort = read_cohort(&test).unwrap();
    let (_, probs) = predict_cohort(&load_checkpoint(&ck).unwrap(), &cohort).unwrap();
    let mean = probs.iter().sum::<f64>() / probs.len() as f64;
    let ece = json["metrics"]["ece"].as_f64().unwrap();
    assert!((ece - (mean - cohort.prevalence()).abs()).abs() < 1e-12);
    assert_eq!(manifest(&report)["command"], "eval");
}

#[test]
fn eval_reports_share_a_schema_across_lambdas() {
    let fx = Fixture::new();
    let test = fx.path("c.test.jsonl");
    let mut keys = Vec::new();
    for (tag, lambda) in [("l0", "0"), ("l1", "0.05")] {
        let (_, ck) = fx.train(tag, &["--lambda", lambda]);
        let report = fx.path(&format!("{tag}.report.json"));
        assert_eq!(code(&run(&["eval", "--cohort", s(&test), "--checkpoint", s(&ck), "--out", s(&report)])), 0);
        let json: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        let mut k: Vec<String> = json["metrics"].as_object().unwrap().keys().cloned().collect();
        k.extend(json["geometry"].as_object().unwrap().keys().cloned());
        keys.push(k);
    }
    assert_eq!(keys[0], keys[1]);
}

#[test]
fn eval_on_single_class_cohort_exits_four() {
    let fx = Fixture::new();
    let (_, ck) = fx.train("m", &[]);
    let mut cohort: Cohort = read_cohort(fx.path("c.test.jsonl")).unwrap();
    cohort.trajectories.retain(|t| t.label == 0);
    let only = fx.path("negatives.jsonl");
    write_cohort(&cohort, &only).unwrap();
    let out = run(&["eval", "--cohort", s(&only), "--checkpoint", s(&ck), "--out", s(&fx.path("r.json"))]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn diverging_training_exits_three() {
    let fx = Fixture::new();
    let (out, _) = fx.train("boom", &["--learning-rate", "1e300", "--lambda", "10"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("epoch"));
}

#[test]
fn sweep_emits_factorial_rows() {
    let fx = Fixture::new();
    let csv = fx.path("sweep.csv");
    let train = fx.path("c.train.jsonl");
    let val = fx.path("c.val.jsonl");
    let out = run(&[
        "sweep", "--cohort", s(&train), "--val", s(&val), "--fractions", "0.5,1.0", "--seeds", "1,2",
        "--epochs", "1", "--out", s(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "fraction,seed,lambda,auroc,auprc,rdisc");
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 2);
    assert_eq!(stdout(&out), text);

    let bad = run(&[
        "sweep", "--cohort", s(&train), "--val", s(&val), "--fractions", "0", "--seeds", "1", "--out", s(&csv),
    ]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let ok = run(&["gradcheck", "--trials", "3"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert_eq!(stdout(&ok).matches("PASS").count(), 4);
    let bad = run(&["gradcheck", "--trials", "2", "--perturb", "rayleigh"]);
    assert_eq!(code(&bad), 5);
    assert!(stdout(&bad).contains("rayleigh"));
    assert_eq!(code(&run(&["gradcheck", "--dims", "3,3"])), 2);
    assert_eq!(code(&run(&["gradcheck", "--dims", "9,2,4,2,4,5"])), 2, "features above the cap");
    assert_eq!(code(&run(&["gradcheck", "--dims", "6,0,4,2,4,5"])), 2, "empty static block");
}
