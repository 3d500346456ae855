use std::path::Path;
use std::process::{Command, Output};

fn modrwkv(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modrwkv"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.json");
    std::fs::write(
        &path,
        r#"{
  "backbone": { "n_layers": 1, "d_model": 16, "n_heads": 2, "vocab_size": 32, "ffn_ratio": 2 },
  "encoder": { "spec": { "kind": "image_patch", "patch": 8 } },
  "compressor": { "kernel": 2, "stride": 1, "padding": 1 },
  "phase1": { "steps": 2, "warmup_steps": 1, "batch_size": 2 },
  "phase2": { "steps": 2, "warmup_steps": 1, "batch_size": 2 },
  "data": { "task": "caption_copy", "grid": 3, "cell_px": 8, "n_train": 8, "n_eval": 4 }
}"#,
    )
    .unwrap();
    path
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(modrwkv(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(modrwkv(&["train", "--max-steps", "many"], dir.path()).status.code(), Some(1));
    assert_eq!(modrwkv(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn missing_or_bad_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let out = modrwkv(&["train", "--config", missing.to_str().unwrap()], &dir.path().join("o"));
    assert_eq!(out.status.code(), Some(1));

    let junk = dir.path().join("junk.mrwk");
    std::fs::write(&junk, b"definitely not a checkpoint").unwrap();
    let out = modrwkv(&["inspect", junk.to_str().unwrap()], &dir.path().join("o"));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn identical_transcripts_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let refs = dir.path().join("refs.txt");
    std::fs::write(&refs, "the cat sat\non the mat\n").unwrap();
    let r = refs.to_str().unwrap();
    for unit in ["word", "char"] {
        let out_dir = dir.path().join(unit);
        let out = modrwkv(&["eval", "--refs", r, "--hyps", r, "--unit", unit], &out_dir);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let csv = std::fs::read_to_string(out_dir.join("eval.csv")).unwrap();
        assert!(csv.lines().nth(1).unwrap().ends_with(",0.0000"), "{csv}");
        assert!(out_dir.join("manifest.json").exists());
    }
}

#[test]
fn train_then_inspect_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let out = modrwkv(&["train", "--quiet", "--config", cfg.to_str().unwrap()], &run);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.mrwk", "train_log.csv", "eval.jsonl", "manifest.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert!(manifest["config_hash"].as_str().is_some_and(|h| !h.is_empty()));

    let ck = run.join("model.mrwk");
    let out = modrwkv(&["inspect", ck.to_str().unwrap()], &dir.path().join("inspect"));
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("backbone"));

    let ev = dir.path().join("ev");
    let out = modrwkv(&["eval", "--checkpoint", ck.to_str().unwrap()], &ev);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_to_string(ev.join("eval.jsonl")).unwrap().contains("accuracy"));
}

#[test]
fn interrupted_training_resumes_to_the_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    let full = dir.path().join("full");
    assert!(modrwkv(&["train", "--quiet", "--config", c], &full).status.success());

    let part = dir.path().join("part");
    let out = modrwkv(&["train", "--quiet", "--config", c, "--max-steps", "3"], &part);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let latest = part.join("model.mrwk");
    assert!(latest.exists());
    let done = dir.path().join("done");
    let out = modrwkv(&["train", "--quiet", "--resume", latest.to_str().unwrap()], &done);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(full.join("model.mrwk")).unwrap(),
        std::fs::read(done.join("model.mrwk")).unwrap()
    );
}
