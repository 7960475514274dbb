use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn handlefield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_handlefield")).args(args).output().expect("spawn handlefield")
}

fn ok(args: &[&str]) -> Output {
    let out = handlefield(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, name: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&["generate-data", "--count", "6", "--n-uniform", "256", "--n-surface", "256", "--handles", "4", "--seed", seed, "--out", s(&out)]);
    out
}

#[test]
fn generate_data_is_reproducible_from_the_seed() {
    let dir = TempDir::new().unwrap();
    let a = std::fs::read(generate(dir.path(), "a.hfds", "3")).unwrap();
    let b = std::fs::read(generate(dir.path(), "b.hfds", "3")).unwrap();
    let c = std::fs::read(generate(dir.path(), "c.hfds", "4")).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn unknown_flag_is_a_usage_error_and_writes_nothing() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.hfds");
    let r = handlefield(&["generate-data", "--count", "2", "--bogus", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
    assert_eq!(handlefield(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("m.obj");
    let missing = dir.path().join("missing");
    let r = handlefield(&[
        "extract-mesh", "--checkpoint", s(&missing), "--data", s(&missing), "--shape-id", "0", "--out", s(&out),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("error"));
    // A level outside [0, 0.05] is rejected before anything is loaded.
    let r = handlefield(&[
        "extract-mesh", "--checkpoint", s(&missing), "--data", s(&missing), "--shape-id", "0", "--level", "0.2", "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("level"));
    assert!(!out.exists());
}

struct Pipeline {
    _dir: TempDir,
    root: PathBuf,
    data: PathBuf,
    pretrained: PathBuf,
}

fn train_args<'a>(p: &'a Pipeline, out: &'a str, epochs: &'a str, metrics: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--data", s(&p.data), "--init", s(&p.pretrained), "--out", out, "--epochs", epochs, "--lr-drop-epoch", "3",
        "--batch-size", "3", "--n-uniform", "128", "--n-surface", "128", "--checkpoint-every", "2", "--metrics", metrics,
        "--seed", "5",
    ]
}

/// Data, canonicalizer, handles and a pre-trained tiny model.
fn pipeline() -> Pipeline {
    let dir = TempDir::new().unwrap();
    let root = dir.path().to_path_buf();
    let raw = generate(&root, "raw.hfds", "1");
    let canon = root.join("canon");
    ok(&["train-canonicalizer", "--data", s(&raw), "--out", s(&canon), "--preset", "tiny", "--points", "64", "--epochs", "2"]);
    let handles = root.join("handles.json");
    let data = root.join("data.hfds");
    ok(&[
        "derive-handles", "--data", s(&raw), "--canonicalizer", s(&canon), "--handles", "4", "--input-points", "64",
        "--snap-points", "128", "--out", s(&handles), "--write-data", s(&data),
    ]);
    let pretrained = root.join("pre");
    ok(&[
        "pretrain-handles", "--data", s(&raw), "--handles-file", s(&handles), "--out", s(&pretrained), "--preset", "tiny",
        "--epochs", "3", "--n-uniform", "128",
    ]);
    Pipeline { _dir: dir, root, data, pretrained }
}

#[test]
fn training_resumes_onto_the_same_trajectory() {
    let p = pipeline();
    let (full, part) = (p.root.join("full"), p.root.join("part"));
    let (mf, mp) = (p.root.join("full.jsonl"), p.root.join("part.jsonl"));
    ok(&train_args(&p, s(&full), "4", s(&mf)));
    ok(&train_args(&p, s(&part), "2", s(&mp)));
    let mut resume = train_args(&p, s(&part), "4", s(&mp));
    resume.push("--resume");
    ok(&resume);
    let params = |d: &Path| std::fs::read(d.join("params.bin")).unwrap();
    assert_eq!(params(&full), params(&part));
    let full_log = std::fs::read_to_string(&mf).unwrap();
    assert_eq!(full_log.lines().count(), 4);
    assert_eq!(full_log, std::fs::read_to_string(&mp).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(full.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["epoch"], 4);

    // Train without handles is refused.
    let raw = p.root.join("raw.hfds");
    let r = handlefield(&["train", "--data", s(&raw), "--init", s(&p.pretrained), "--out", s(&p.root.join("x"))]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn editing_and_experiments_run_deterministically() {
    let p = pipeline();
    let ckpt = p.root.join("model");
    ok(&train_args(&p, s(&ckpt), "2", s(&p.root.join("m.jsonl"))));
    let edit = |name: &str| {
        let hist = p.root.join(format!("{name}.json"));
        let out = p.root.join(format!("{name}.obj"));
        let r = handlefield(&[
            "edit", "--checkpoint", s(&ckpt), "--data", s(&p.data), "--shape-id", "0", "--move", "0:0.1,0.1,0.4",
            "--rounds", "2", "--resolution", "12", "--history", s(&hist), "--out", s(&out), "--seed", "9",
        ]);
        (r.status.code(), std::fs::read(&hist).ok(), std::fs::read(&out).ok())
    };
    let a = edit("a");
    let b = edit("b");
    assert_eq!(a, b);
    // A tiny model may decode no surface at all; that is a runtime error, and then no files appear.
    match a.0 {
        Some(0) => assert!(a.1.is_some() && a.2.is_some()),
        Some(1) => assert!(a.1.is_none() && a.2.is_none()),
        other => panic!("unexpected exit {other:?}"),
    }

    let labels = p.root.join("labels.json");
    let samples = p.root.join("samples.json");
    ok(&[
        "segment", "--checkpoint", s(&ckpt), "--data", s(&p.data), "--shape-id", "1", "--k", "2", "--samples", "40",
        "--repetitions", "4", "--out", s(&labels), "--samples-out", s(&samples),
    ]);
    let l: Vec<usize> = serde_json::from_slice(&std::fs::read(&labels).unwrap()).unwrap();
    let pts: Vec<[f64; 3]> = serde_json::from_slice(&std::fs::read(&samples).unwrap()).unwrap();
    assert_eq!(l.len(), 40);
    assert_eq!(pts.len(), 40);
    assert!(l.iter().all(|&x| x < 2));

    let rep = p.root.join("rep.json");
    for _ in 0..2 {
        ok(&[
            "reproject-exp", "--checkpoint", s(&ckpt), "--data", s(&p.data), "--trials", "5", "--samples", "64", "--out",
            s(&rep), "--seed", "2",
        ]);
    }
    let stats: serde_json::Value = serde_json::from_slice(&std::fs::read(&rep).unwrap()).unwrap();
    assert_eq!(stats["trials"], 5);
    let uniq = p.root.join("uniq.json");
    ok(&[
        "unique-exp", "--checkpoint", s(&ckpt), "--data", s(&p.data), "--n-extreme", "2", "--shifts", "2", "--samples",
        "64", "--out", s(&uniq),
    ]);
    let u: serde_json::Value = serde_json::from_slice(&std::fs::read(&uniq).unwrap()).unwrap();
    assert_eq!(u["unique_ids"].as_array().unwrap().len(), 2);
}
