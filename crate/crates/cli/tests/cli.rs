use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "n_pairs=6",
    "--set",
    "pair_image_size=96",
    "--set",
    "n_train_sequences=2",
    "--set",
    "n_eval_sequences=2",
    "--set",
    "n_frames=4",
    "--set",
    "pretrain_epochs=1",
    "--set",
    "pretrain_examples=4",
    "--set",
    "pretrain_batch_size=2",
    "--set",
    "pretrain_loss_threshold=1e9",
];

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thermal-distill")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = bin(args);
    assert!(o.status.success(), "{args:?}\n{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    let out = p(d.path());
    assert_eq!(bin(&["synth", "--out", out, "--set", "not_a_key=1"]).status.code(), Some(1));
    assert_eq!(bin(&["synth", "--out", out, "--set", "epochs=many"]).status.code(), Some(1));
    assert_eq!(bin(&["synth", "--out", out, "--set", "novalue"]).status.code(), Some(1));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    let t = bin(&["train", "--out", out, "--setting", "Z9", "--init", "x", "--manifest", "y"]);
    assert_eq!(t.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&t.stderr).contains("Z9"));
}

#[test]
fn runtime_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("missing.json");
    let o = bin(&["pairs", "--out", p(d.path()), "--manifest", p(&missing)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn precedence_is_file_then_set_then_seed() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.toml");
    fs::write(&cfg, "epochs = 3\nseed = 5\nn_pairs = 2\npair_image_size = 64\nn_train_sequences = 1\nn_eval_sequences = 1\nn_frames = 2\n").unwrap();
    let out = d.path().join("o");
    ok(&["synth", "--out", p(&out), "--config", p(&cfg), "--set", "epochs=4", "--set", "seed=6", "--seed", "7"]);
    let m = manifest(&out);
    assert_eq!(m["resolved"]["epochs"], 4);
    assert_eq!(m["resolved"]["seed"], 7);
    assert_eq!(m["resolved"]["eval_sequences"]["seed"], 1007);
    assert_eq!(m["command"], "synth");
    assert!(m["version"].is_string());
    assert!(m["argv"].as_array().unwrap().iter().any(|a| a == "--seed"));
}

#[test]
fn pipeline_end_to_end() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    let data = root.join("data");
    let mut args = vec!["synth", "--out", p(&data)];
    args.extend_from_slice(TINY);
    ok(&args);
    let pairs_manifest = data.join("pairs").join("pairs.jsonl");
    assert!(pairs_manifest.exists());

    let patches = root.join("patches");
    let o = ok(&["pairs", "--out", p(&patches), "--manifest", p(&pairs_manifest), "--strategy", "detection"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("6 paired samples"));
    assert_eq!(bin(&["pairs", "--out", p(&patches), "--manifest", p(&pairs_manifest), "--strategy", "nope"]).status.code(), Some(1));

    let teacher_dir = root.join("teacher");
    let train_rgb = data.join("train_rgb");
    let mut args = vec!["pretrain-rgb", "--out", p(&teacher_dir), "--sequences", p(&train_rgb)];
    args.extend_from_slice(TINY);
    ok(&args);
    let teacher = teacher_dir.join("teacher.tdmd");
    assert!(teacher.exists() && teacher_dir.join("pretrain_loss.csv").exists());

    let short = ["--desk", "--set", "epochs=1", "--set", "samples_per_epoch=2", "--set", "batch_size=2"];
    let train = |setting: &str, out: &Path, extra: &[&str]| {
        let mut a = vec!["train", "--setting", setting, "--out", p(out), "--init", p(&teacher), "--manifest", p(&pairs_manifest)];
        a.extend_from_slice(&short);
        a.extend_from_slice(extra);
        ok(&a);
    };
    let b1 = root.join("b1");
    let b2 = root.join("b2");
    train("B1", &b1, &[]);
    train("B2", &b2, &[]);
    let loss = fs::read_to_string(b1.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 2, "{loss}");
    assert_eq!(manifest(&b1)["resolved"]["epochs"], 1);

    let b3 = root.join("b3");
    let b1_ck = b1.join("checkpoint.tdts");
    let b2_ck = b2.join("checkpoint.tdts");
    train("B3", &b3, &["--branches", p(&b1_ck), p(&b2_ck)]);
    assert!(b3.join("model.tdmd").exists());
    let mut a = vec!["train", "--setting", "B3", "--out", p(&b3), "--init", p(&teacher), "--manifest", p(&pairs_manifest)];
    a.extend_from_slice(&short);
    assert_eq!(bin(&a).status.code(), Some(1));

    let c1 = root.join("c1");
    train("C1", &c1, &[]);
    let d3 = root.join("d3");
    train("D3", &d3, &["--c1", p(&c1.join("checkpoint.tdts"))]);

    let resumed = root.join("resumed");
    let mut a = vec!["train", "--setting", "D3", "--out", p(&resumed), "--init", p(&teacher), "--manifest", p(&pairs_manifest)];
    a.extend_from_slice(&["--desk", "--set", "epochs=2", "--set", "samples_per_epoch=2", "--set", "batch_size=2"]);
    let ck = d3.join("checkpoint.tdts");
    a.extend_from_slice(&["--resume", p(&ck)]);
    ok(&a);
    assert_eq!(fs::read_to_string(resumed.join("loss.csv")).unwrap().lines().count(), 3);

    let eval_root = data.join("eval_tir");
    let mut seq_dirs: Vec<_> = fs::read_dir(&eval_root).unwrap().map(|e| e.unwrap().path()).collect();
    seq_dirs.sort();
    let results = root.join("results");
    for s in &seq_dirs {
        let o = ok(&["track", "--out", p(&results), "--model", p(&d3.join("model.tdmd")), "--sequence", p(s)]);
        assert!(String::from_utf8_lossy(&o.stdout).trim().ends_with(".txt"));
    }
    let report = root.join("report");
    let spec = format!("D3={}", p(&results));
    let o = ok(&["eval", "--out", p(&report), "--sequences", p(&eval_root), "--results", &spec]);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("D3: S "));
    for f in ["precision.csv", "norm_precision.csv", "success.csv", "summary.json"] {
        assert!(report.join(f).exists(), "{f}");
    }
    let success = fs::read_to_string(report.join("success.csv")).unwrap();
    assert_eq!(success.lines().next().unwrap(), "threshold,D3");
    assert_eq!(success.lines().count(), 22);
    let o = bin(&["eval", "--out", p(&report), "--sequences", p(&eval_root), "--results", "D3"]);
    assert_eq!(o.status.code(), Some(1));
}
