use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const WORDS: [[&str; 3]; 5] = [
    ["semma", "mass", "super"],
    ["mosam", "waste", "flop"],
    ["okay", "average", "sumar"],
    ["bahut", "accha", "yaar"],
    ["trailer", "release", "update"],
];
const LABELS: [&str; 5] = ["positive", "negative", "mixed_feelings", "not_tamil", "unknown_state"];

fn cmsenti(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmsenti")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_data(path: &Path, n: usize, offset: usize) {
    let mut s = String::new();
    for i in 0..n {
        let c = i % 5;
        let w = &WORDS[c];
        let k = i + offset;
        s += &format!("{} intha {} padam {} bro\t{}\n", w[k % 3], w[(k + 1) % 3], w[(k / 3) % 3], LABELS[c]);
    }
    fs::write(path, s).unwrap();
}

/// Returns the temp dir and the config path.
fn fixture() -> (TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_data(&d.join("train.tsv"), 40, 0);
    write_data(&d.join("dev.tsv"), 10, 1);
    let cfg = serde_json::json!({
        "paths": {
            "train": d.join("train.tsv"),
            "dev": d.join("dev.tsv"),
            "artifacts": d.join("artifacts"),
        },
        "tokenizer": {"vocab_size": 60},
        "skipgram": {"dim": 16, "epochs": 3, "buckets": 2000},
        "contextual": {"emb_dim": 8, "hidden": 8, "epochs": 2},
        "tfidf": {"terms": 100},
        "model": {"hid_dim": 16, "n_heads": 2, "pf_dim": 32, "gru_hidden": 8, "max_len": 16},
        "train": {"max_epochs": 4, "lr": 0.005, "batch_size": 8},
    });
    let path = d.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    (dir, path.to_str().unwrap().to_owned())
}

#[test]
fn unknown_command_is_a_usage_error() {
    let o = cmsenti(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).to_lowercase().contains("usage"), "{}", stderr(&o));
}

#[test]
fn bad_config_names_the_field() {
    let (_d, cfg) = fixture();
    let o = cmsenti(&["train", "--config", &cfg, "--set", "model.n_heads=3"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error[validation]:"), "{err}");
    assert!(err.contains("n_heads"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");

    let o = cmsenti(&["train", "--config", &cfg, "--set", "train.learning_rate=0.1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn train_before_tokenizer_names_vocab() {
    let (_d, cfg) = fixture();
    let o = cmsenti(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error[dependency]:") && err.contains("vocab.json"), "{err}");
}

#[test]
fn full_pipeline_then_eval_and_predict() {
    let (d, cfg) = fixture();
    let ok = |args: &[&str]| {
        let o = cmsenti(args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        stdout(&o)
    };
    ok(&["train-tokenizer", "--config", &cfg, "--kind", "bpe"]);
    for kind in ["skipgram", "contextual", "tfidf"] {
        ok(&["train-embed", "--config", &cfg, "--kind", kind]);
    }
    let out = ok(&["train", "--config", &cfg]);
    assert!(out.contains("kept epoch"), "{out}");

    let metrics = d.path().join("artifacts/metrics.json");
    fs::remove_file(&metrics).unwrap();
    let out = ok(&["eval", "--config", &cfg]);
    assert!(out.contains("weighted avg") && out.contains("not_tamil"), "{out}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(json["confusion"].as_array().unwrap().len(), 5);

    let ckpt = d.path().join("artifacts/model.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let args = ["predict", "--checkpoint", ckpt, "--text", "semma mass padam", "--text", "mosam flop"];
    let first = ok(&args);
    assert_eq!(first, ok(&args));
    assert_eq!(first.lines().count(), 2);
    for line in first.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let p: f64 = v["probabilities"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
        assert!((p - 1.0).abs() < 1e-6);
        assert!(LABELS.contains(&v["label"].as_str().unwrap()));
    }

    let o = cmsenti(&["predict", "--checkpoint", ckpt, "--text", "  "]);
    assert_eq!(o.status.code(), Some(1));
    fs::write(d.path().join("artifacts/model.ckpt"), b"CMS1 nope").unwrap();
    let o = cmsenti(&["predict", "--checkpoint", ckpt, "--text", "semma"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).starts_with("error["), "{}", stderr(&o));
}
