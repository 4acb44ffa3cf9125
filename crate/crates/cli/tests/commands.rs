use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pgformer"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, samples: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("synth_{seed}_{samples}.jsonl"));
    let o = run(&["--seed", &seed.to_string(), "synth", "--samples", &samples.to_string(), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn train_toy(dir: &Path, data: &Path, name: &str) -> PathBuf {
    let w = dir.join(format!("{name}.json"));
    let log = dir.join(format!("{name}.log"));
    let cfg = configs().join("toy.json");
    let o = run(&[
        "--seed",
        "5",
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(data),
        "--out-weights",
        s(&w),
        "--log",
        s(&log),
        "--epochs",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    w
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["lift", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(run(&[]).status.code(), Some(1));
}

#[test]
fn help_lists_published_defaults() {
    let o = run(&["train", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for needle in ["0.025", "2048", "--seed", "--no-flip"] {
        assert!(text.contains(needle), "missing {needle} in help");
    }
    let o = run(&["sample", "--help"]);
    assert!(stdout(&o).contains("default: 5"));
}

#[test]
fn params_of_shipped_configs() {
    let o = run(&["params", "--config", s(&configs().join("gt.json"))]);
    assert!(o.status.success());
    let text = stdout(&o);
    let count: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("parameters: "))
        .and_then(|v| v.trim().parse().ok())
        .expect("count line");
    assert!((600_000..=720_000).contains(&count), "{count}");
    let o = run(&["params", "--preset", "cpn"]);
    assert!(stdout(&o).contains("parameters: 3695107"));
}

#[test]
fn gradcheck_pga_passes() {
    let o = run(&["gradcheck", "--module", "pga"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let last = text.lines().rev().find(|l| l.starts_with("max relative error")).unwrap();
    let err: f64 = last.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(err < 1e-4, "{err}");
    assert_eq!(run(&["gradcheck", "--module", "conv"]).status.code(), Some(1));
}

#[test]
fn synth_is_seed_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), 50, 9);
    let b = dir.path().join("again.jsonl");
    assert!(run(&["--seed", "9", "synth", "--samples", "50", "--out", s(&b)]).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = synth(dir.path(), 50, 10);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn train_lift_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 200, 1);
    let w = train_toy(dir.path(), &data, "w");
    let again = train_toy(dir.path(), &data, "w2");
    assert_eq!(
        std::fs::read(w.with_extension("json.bin")).unwrap(),
        std::fs::read(again.with_extension("json.bin")).unwrap(),
        "training is bit-reproducible"
    );
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(&w).unwrap()).unwrap();
    assert_eq!(manifest["provenance"]["train"]["epochs"], 1);

    let log = std::fs::read_to_string(dir.path().join("w.log")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["val_mpjpe_mm"].as_f64().unwrap().is_finite());

    let pred = dir.path().join("pred.jsonl");
    assert!(run(&["lift", "--weights", s(&w), "--input", s(&data), "--output", s(&pred)]).status.success());
    let report = dir.path().join("report.json");
    let hist = dir.path().join("hist.csv");
    let o = run(&["eval", "--pred", s(&pred), "--gt", s(&data), "--report", s(&report), "--histogram", s(&hist)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let mpjpe = r["metrics"]["mpjpe_mm"].as_f64().unwrap();
    assert!(mpjpe > 0.0 && mpjpe.is_finite());
    assert_eq!(r["provenance"]["command"], "eval");
    assert!(std::fs::read_to_string(&hist).unwrap().starts_with("lower_mm,upper_mm,count"));

    // ground truth against itself scores zero
    let o = run(&["eval", "--pred", s(&data), "--gt", s(&data), "--report", s(&report)]);
    assert!(o.status.success());
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["metrics"]["mpjpe_mm"].as_f64().unwrap(), 0.0);

    let csv = dir.path().join("attn.csv");
    let o = run(&["attn", "--weights", s(&w), "--input", s(&data), "--out-csv", s(&csv), "--sample", "3"]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("layer,head,query,"));
    for line in text.lines().skip(1) {
        let sum: f64 = line.split(',').skip(3).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-6, "{sum}");
    }
    assert!(dir.path().join("attn.csv.json").exists());
    let o = run(&["attn", "--weights", s(&w), "--input", s(&data), "--out-csv", s(&csv), "--sample", "999"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn lift_rejects_joint_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 40, 2);
    let w = train_toy(dir.path(), &data, "w");
    let other = dir.path().join("wide.jsonl");
    let synth_cfg = dir.path().join("s17.json");
    std::fs::write(&synth_cfg, r#"{"skeleton": "skeleton17", "samples": 10}"#).unwrap();
    let o = run(&["synth", "--config", s(&synth_cfg), "--out", s(&other)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("p.jsonl");
    let o = run(&["lift", "--weights", s(&w), "--input", s(&other), "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("joints"));
}

#[test]
fn malformed_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "not json\n").unwrap();
    let report = dir.path().join("r.json");
    let o = run(&["eval", "--pred", s(&bad), "--gt", s(&bad), "--report", s(&report)]);
    assert_eq!(o.status.code(), Some(2));
    let missing = dir.path().join("nope.jsonl");
    let o = run(&["eval", "--pred", s(&missing), "--gt", s(&missing), "--report", s(&report)]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"train": {"lambda": 2.0}}"#).unwrap();
    let data = synth(dir.path(), 20, 0);
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out-weights",
        s(&dir.path().join("w.json")),
        "--log",
        s(&dir.path().join("l")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn diffusion_train_and_sample() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 120, 4);
    let enc = train_toy(dir.path(), &data, "enc");
    let dw = dir.path().join("den.json");
    let cfg = configs().join("toy.json");
    let o = run(&[
        "train",
        "--diffusion",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--encoder-weights",
        s(&enc),
        "--out-weights",
        s(&dw),
        "--log",
        s(&dir.path().join("d.log")),
        "--epochs",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let sample = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = run(&[
            "--seed",
            seed,
            "sample",
            "--weights",
            s(&dw),
            "--encoder-weights",
            s(&enc),
            "--input",
            s(&data),
            "--output",
            s(&out),
            "--steps",
            "5",
            "--samples",
            "5",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out).unwrap()
    };
    let a = sample("a.jsonl", "7");
    assert_eq!(a, sample("b.jsonl", "7"));
    assert_ne!(a, sample("c.jsonl", "8"));

    let o = run(&[
        "sample",
        "--weights",
        s(&dw),
        "--encoder-weights",
        s(&enc),
        "--input",
        s(&data),
        "--output",
        s(&dir.path().join("x")),
        "--steps",
        "0",
    ]);
    assert_ne!(o.status.code(), Some(0));
}
