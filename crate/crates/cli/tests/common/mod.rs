#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn medna(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medna"))
        .current_dir(dir)
        .env_remove("MEDNA_OUT_DIR")
        .args(args)
        .output()
        .expect("spawn medna")
}

pub fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = medna(dir, args);
    assert!(
        out.status.success(),
        "medna {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub const SMALL_SPEC: &str = r#"{"n_pos":60,"n_neg":60}"#;

pub const SMALL_CONFIG: &str = r#"{
  "model": {"d_model":16,"encoder_layers":1,"encoder_heads":2,"encoder_ff":32,"expert_heads":2,
            "expert_ff":8,"kmer":3,"bpe_vocab":40,"classifier_hidden":8,"dropout":0.1},
  "train": {"epochs":6,"batch_size":16,"learning_rate":0.01}
}"#;

pub const DISJOINT_SPEC: &str = r#"{"name":"disjoint","n_pos":60,"n_neg":60,"core_motif":"CTTC","tract":"GGGG"}"#;

/// Runs every command once inside `root`, writing each into its own output directory.
pub fn pipeline(root: &Path, extra: &[&str]) {
    std::fs::write(root.join("spec.json"), SMALL_SPEC).unwrap();
    std::fs::write(root.join("spec2.json"), DISJOINT_SPEC).unwrap();
    std::fs::write(root.join("cfg.json"), SMALL_CONFIG).unwrap();
    std::fs::write(
        root.join("rules.json"),
        r#"[{"pattern":"GAGG","replacement":"CTCC"},{"pattern":"AAAA","replacement":"TATA"}]"#,
    )
    .unwrap();
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth", "--spec", "spec.json", "--seed", "3", "--out", "data"],
        vec!["synth", "--spec", "spec2.json", "--seed", "4", "--out", "data2"],
        vec!["train", "--data", "data", "--config", "cfg.json", "--seed", "1", "--out", "run"],
        vec!["train", "--data", "data2", "--config", "cfg.json", "--seed", "1", "--out", "run2"],
        vec!["eval", "--ckpt", "run/checkpoint.json", "--data", "data", "--out", "eval"],
        vec!["cad", "--ckpt", "run/checkpoint.json", "--data", "data", "--threshold", "0.6", "--fasta-top", "3", "--out", "cad"],
        vec![
            "cwga", "--ckpt", "run/checkpoint.json", "--data", "data", "--threshold", "0.6", "--top-dims", "4", "--ig-steps",
            "8", "--fasta-top", "2", "--out", "cwga",
        ],
        vec!["mutate", "--ckpt", "run/checkpoint.json", "--data", "data", "--rules", "rules.json", "--out", "mutate"],
        vec![
            "transfer", "--ckpts", "run/checkpoint.json,run2/checkpoint.json", "--datasets", "data,data2", "--out", "transfer",
        ],
        vec!["embed", "--ckpt", "run/checkpoint.json", "--data", "data", "--stage", "post-moe", "--out", "embed"],
    ];
    for step in steps {
        let mut args = step.clone();
        args.extend_from_slice(extra);
        ok(root, &args);
    }
}

/// Every file under `root`, keyed by relative path.
pub fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// A manifest with its timing fields removed.
pub fn manifest_without_timing(bytes: &[u8]) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    let obj = v.as_object_mut().unwrap();
    obj.remove("started_unix");
    obj.remove("wall_seconds");
    v
}

/// Files that differ between two runs, ignoring manifest timing.
pub fn differing_files(a: &Path, b: &Path) -> Vec<PathBuf> {
    let (fa, fb) = (files(a), files(b));
    let mut diff: Vec<PathBuf> = fa.keys().filter(|k| !fb.contains_key(*k)).cloned().collect();
    diff.extend(fb.keys().filter(|k| !fa.contains_key(*k)).cloned());
    for (k, va) in &fa {
        let Some(vb) = fb.get(k) else { continue };
        let same = if k.file_name().is_some_and(|n| n == "manifest.json") {
            manifest_without_timing(va) == manifest_without_timing(vb)
        } else {
            va == vb
        };
        if !same {
            diff.push(k.clone());
        }
    }
    diff
}
