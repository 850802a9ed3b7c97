use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use proptest::prelude::*;
use serde_json::Value;

use promptseg_cli::parse_grid;

fn promptseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptseg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn gen(cwd: &Path, out: &str, seed: &str, channels: &str) -> Output {
    promptseg(
        &[
            "gen-data", "--out", out, "--series", "2", "--len", "3000", "--channels", channels, "--states", "3",
            "--seed", seed, "--min-seg", "30", "--max-seg", "120",
        ],
        cwd,
    )
}

const SMALL: [&str; 22] = [
    "--window-len", "64", "--hop", "16", "--d-model", "16", "--enc-layers", "1", "--dec-blocks", "1", "--patch-len",
    "16", "--patch-hop", "8", "--np", "2", "--nr", "4", "--batch-size", "4", "--lr", "1e-3",
];

fn train(cwd: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", "ds", "--out-dir", out];
    args.extend(SMALL);
    args.extend(extra);
    promptseg(&args, cwd)
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn every_subcommand_has_help() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["gen-data", "train", "eval", "sweep", "serve"] {
        let o = promptseg(&[sub, "--help"], dir.path());
        assert_eq!(code(&o), 0, "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"), "{sub}");
    }
    assert_eq!(code(&promptseg(&["--version"], dir.path())), 0);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&promptseg(&["train", "--bogus"], dir.path())), 1);
    assert_eq!(code(&promptseg(&[], dir.path())), 1);
    assert_eq!(code(&promptseg(&["train"], dir.path())), 1, "no dataset");
    assert_eq!(code(&promptseg(&["gen-data", "--out", "single", "--states", "1"], dir.path())), 1);
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for (out, seed) in [("a", "3"), ("b", "3"), ("c", "4")] {
        assert_eq!(code(&gen(dir.path(), out, seed, "2")), 0);
    }
    let read = |d: &str, f: &str| fs::read(dir.path().join(d).join(f)).unwrap();
    for f in ["meta.json", "series_000.csv", "series_001.csv"] {
        assert_eq!(read("a", f), read("b", f), "{f}");
    }
    assert_ne!(read("a", "series_000.csv"), read("c", "series_000.csv"));
    let m = json(dir.path().join("a/manifest.json"));
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["seed"], 3);
}

#[test]
fn train_eval_and_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    assert_eq!(code(&gen(cwd, "ds", "1", "2")), 0);

    let o = train(cwd, "run1", &["--epochs", "1", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.json", "history.jsonl", "report.json", "checkpoint/manifest.json"] {
        assert!(cwd.join("run1").join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(cwd.join("run1/history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 1);
    let manifest = json(cwd.join("run1/manifest.json"));
    for key in ["command", "config", "seed", "code_version", "started_at", "finished_at", "outputs", "timing"] {
        assert!(manifest.get(key).is_some(), "manifest lacks {key}");
    }
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["model"]["context_len"], 64, "context length defaults to the window length");

    // rerunning from the manifest reproduces the run
    let o = promptseg(&["train", "--config", "run1/manifest.json", "--out-dir", "run2"], cwd);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(cwd.join("run1/report.json")).unwrap(), fs::read(cwd.join("run2/report.json")).unwrap());
    assert_eq!(json(cwd.join("run1/manifest.json"))["config"], json(cwd.join("run2/manifest.json"))["config"]);

    let o = promptseg(
        &["eval", "--checkpoint", "run1/checkpoint", "--data", "ds", "--protocol", "iterative", "--np", "2", "--nr", "3", "--out-dir", "ev"],
        cwd,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let curve = json(cwd.join("ev/curve.json"));
    assert_eq!(curve["acc"].as_array().unwrap().len(), 3);
    assert_eq!(json(cwd.join("ev/report.json"))["report"]["protocol"], "iterative");

    let o = promptseg(&["eval", "--checkpoint", "run1/checkpoint", "--data", "ds", "--out-dir", "ev1"], cwd);
    assert_eq!(code(&o), 0);
    let r = json(cwd.join("ev1/report.json"));
    assert!(r["level_agreement"].as_f64().is_some());

    // a dataset of another shape is refused
    assert_eq!(code(&gen(cwd, "other", "1", "3")), 0);
    let o = promptseg(&["eval", "--checkpoint", "run1/checkpoint", "--data", "other", "--out-dir", "ev2"], cwd);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("channels"));

    let o = promptseg(&["eval", "--checkpoint", "missing", "--data", "ds"], cwd);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    assert_eq!(code(&gen(cwd, "ds", "1", "2")), 0);
    assert_eq!(code(&train(cwd, "r", &["--np", "50"])), 1, "budget exceeded");
    assert_eq!(code(&train(cwd, "r", &["--d-model", "15"])), 1);
    fs::write(cwd.join("bad.json"), r#"{"learning_rate": 0.1}"#).unwrap();
    assert_eq!(code(&promptseg(&["train", "--data", "ds", "--config", "bad.json"], cwd)), 1);
    assert_eq!(code(&promptseg(&["train", "--data", "nowhere"], cwd)), 2);
    let mut sweep = vec!["sweep", "--data", "ds", "--grid", "depth=1,2"];
    assert_eq!(code(&promptseg(&sweep, cwd)), 1);
    sweep[4] = "windows=";
    assert_eq!(code(&promptseg(&sweep, cwd)), 1);
}

proptest! {
    #[test]
    fn grid_multiples_of_the_window(t in 1usize..512, ks in proptest::collection::vec(1usize..8, 1..5)) {
        let spec = format!("tctx={}", ks.iter().map(|k| format!("{k}T")).collect::<Vec<_>>().join(","));
        let (key, values) = parse_grid(&spec, t).unwrap();
        prop_assert_eq!(key, "tctx");
        prop_assert_eq!(values, ks.iter().map(|k| k * t).collect::<Vec<_>>());
    }
}
