use std::fs;
use std::process::{Command, Output};

fn sharelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sharelab"))
        .args(args)
        .env_remove("SHARELAB_TRAIN_LR_PEAK")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &[&str] = &[
    "--set",
    "task.vocab=16",
    "--set",
    "task.min_len=2",
    "--set",
    "task.max_len=5",
    "--set",
    "task.train_size=100",
    "--set",
    "task.valid_size=10",
    "--set",
    "task.test_size=8",
    "--set",
    "train.max_steps=10",
    "--set",
    "train.warmup_steps=3",
    "--set",
    "train.batch_tokens=40",
    "--set",
    "train.eval_every=5",
    "--set",
    "train.checkpoint_every=5",
];

#[test]
fn flops_prints_published_base_figure() {
    let o = sharelab(&["flops", "--preset", "base"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("1.81G"), "{}", stdout(&o));
    let o = sharelab(&[
        "flops",
        "--preset",
        "base",
        "--set",
        "model.sharing.mode=SIL",
        "--set",
        "model.sharing.factor=4",
    ]);
    assert!(stdout(&o).contains("3.51G"), "{}", stdout(&o));
}

#[test]
fn flops_json_is_a_report() {
    let o = sharelab(&["flops", "--preset", "big", "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["src_len"], 30);
    assert!(v["flops"].as_u64().unwrap() > 6_000_000_000);
}

#[test]
fn params_reports_count() {
    let o = sharelab(&["params", "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let toy = v["params"].as_u64().unwrap();
    let o = sharelab(&[
        "params",
        "--json",
        "--set",
        "model.sharing.mode=SIB",
        "--set",
        "model.sharing.factor=4",
    ]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["params"].as_u64().unwrap(), toy);
}

#[test]
fn validation_errors_exit_2() {
    let o = sharelab(&["params", "--set", "model.width=0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.width"));
    let o = sharelab(&["run", "--set", "train.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_files_exit_4() {
    let o = sharelab(&["run", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(o.status.code(), Some(4));
    let dir = tempfile::tempdir().unwrap();
    let o = sharelab(&["analyze", dir.path().to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn env_overrides_file_and_flag_overrides_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[model]\nwidth = 64\n").unwrap();
    let path = cfg.to_str().unwrap();
    let width = |extra: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_sharelab"));
        cmd.args(["params", "--json", "--config", path]).args(extra);
        if let Some(w) = env {
            cmd.env("SHARELAB_MODEL_WIDTH", w);
        }
        let o = cmd.output().unwrap();
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        v["params"].as_u64().unwrap()
    };
    let file = width(&[], None);
    let env = width(&[], Some("16"));
    let flag = width(&["--set", "model.width=32"], Some("16"));
    assert!(env < flag && flag < file);
}

#[test]
fn run_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["run", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let o = sharelab(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "steps.csv",
        "evals.csv",
        "summary.json",
        "decodes.tsv",
        "config.toml",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let o = sharelab(&["analyze", out.to_str().unwrap(), "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let total: u64 = v["bleu_histogram"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p[1].as_u64().unwrap())
        .sum();
    assert_eq!(total, 8);
}

#[test]
fn exploding_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["run", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--set", "train.divergence_loss=0.5"]);
    let o = sharelab(&args);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(out.join("summary.json").exists());
}
