use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prosody-flow"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn prosody-flow")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Corpus of four utterances and a three-step tiny model in `dir`.
fn trained(dir: &Path) -> String {
    ok(dir, &["generate-corpus", "--n-utts", "4", "--seed", "3"]);
    std::fs::write(dir.join("c.cfg"), "model = tiny\nbatch_size = 2\nepochs = 1\n").unwrap();
    ok(dir, &["train", "--config", "c.cfg", "--out", "runs/default"]);
    let manifest = std::fs::read_to_string(dir.join("corpus/manifest.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    first["id"].as_str().unwrap().to_owned()
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["selftest"]);
    assert!(out.contains("0 failed"), "{out}");
    assert!(!out.contains("[FAIL]"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &[]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &["synth", "--text", "a", "--ref", "x", "--checkpoint", "missing.ckpt"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.cfg"), "seed = 5\nmax_steps = 10\nbatch_size = 2\n").unwrap();
    let shown = ok(
        dir.path(),
        &[
            "train",
            "--config",
            "c.cfg",
            "--seed",
            "9",
            "--set",
            "w_dur=0.5",
            "--show-config",
        ],
    );
    assert!(shown.contains("seed = 9"), "{shown}");
    assert!(shown.contains("max_steps = 10"));
    assert!(shown.contains("batch_size = 2"));
    assert!(shown.contains("w_dur = 0.5"));
    let defaults = ok(dir.path(), &["train", "--show-config"]);
    assert!(defaults.contains("batch_size = 8"));
}

#[test]
fn train_synth_control_eval_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let id = trained(dir);

    let log = std::fs::read_to_string(dir.join("runs/default/losses.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,cfm,prior,dur,tp_align,total");
    assert_eq!(lines.len(), 3, "two steps for four utterances at batch 2");

    let manifest = std::fs::read_to_string(dir.join("corpus/manifest.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    let text = first["text"].as_str().unwrap();
    ok(
        dir,
        &["synth", "--text", text, "--ref", &id, "--seed", "7", "--out", "a.pfm"],
    );
    ok(
        dir,
        &["synth", "--text", text, "--ref", &id, "--seed", "7", "--out", "b.pfm"],
    );
    let a = std::fs::read(dir.join("a.pfm")).unwrap();
    assert_eq!(&a[..4], b"PFM1");
    assert_eq!(a, std::fs::read(dir.join("b.pfm")).unwrap());

    ok(
        dir,
        &[
            "control",
            "--ref",
            &id,
            "--add-break",
            "0",
            "--n-ode-steps",
            "2",
            "--out",
            "c.pfm",
        ],
    );
    assert!(dir.join("c.pfm").exists());
    let bad = run(
        dir,
        &["control", "--ref", &id, "--slope", "nosuchword=2", "--out", "d.pfm"],
    );
    assert_eq!(bad.status.code(), Some(1));

    ok(dir, &["eval", "--report", "report.json", "--n-ode-steps", "2"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    for key in ["rmse_f0", "break_f1", "wer"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["per_utterance"].as_array().unwrap().len(), 4);
}

#[test]
fn resume_extends_the_loss_log() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    ok(
        dir,
        &[
            "train",
            "--config",
            "c.cfg",
            "--resume",
            "runs/default/final.ckpt",
            "--set",
            "epochs=2",
            "--out",
            "runs/default",
        ],
    );
    let log = std::fs::read_to_string(dir.join("runs/default/losses.csv")).unwrap();
    let steps: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "3", "4"]);
}
