use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sumtopic::synthetic::{planted_corpus, PlantedConfig};

fn sumtopic(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sumtopic"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn sumtopic")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = sumtopic(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn raw_corpus(dir: &Path, n_docs: usize) {
    let planted = planted_corpus(&PlantedConfig { n_docs, doc_words: 40, ..PlantedConfig::default() });
    let mut csv = String::from("id,body,topic\n");
    for d in &planted.corpus.documents {
        csv.push_str(&format!("{},\"{}\",{}\n", d.id, d.text, d.label.as_deref().unwrap()));
    }
    fs::write(dir.join("raw.csv"), csv).unwrap();
}

#[test]
fn subcommands_chain_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    raw_corpus(dir, 120);

    let s = ok(dir, &[
        "ingest", "raw.csv", "--format", "csv", "--text-field", "body", "--label-field", "topic",
        "--name", "toy", "-o", "full.jsonl", "--vocab", "vocab.json",
    ]);
    assert!(s.contains("120 documents, 3 labels"), "{s}");
    assert!(dir.join("vocab.json").exists());

    for v in ["short", "long"] {
        let out = format!("{v}.jsonl");
        let s = ok(dir, &["summarize", "full.jsonl", "--variant", v, "-o", &out, "--cache", "cache", "--offline"]);
        assert!(s.contains("via extractive"), "{s}");
    }
    // both variants land in the shared cache
    assert_eq!(fs::read_dir(dir.join("cache/extractive")).unwrap().count(), 240);
    let again = ok(dir, &["summarize", "full.jsonl", "--variant", "short", "-o", "short2.jsonl", "--cache", "cache", "--offline"]);
    assert!(again.contains("0 failed"));
    assert_eq!(fs::read(dir.join("short.jsonl")).unwrap(), fs::read(dir.join("short2.jsonl")).unwrap());

    let s = ok(dir, &["embed", "short.jsonl", "-o", "short.stem", "--offline"]);
    assert!(s.starts_with("120 x 256 embeddings via hashing-d256-s42"), "{s}");
    assert!(dir.join("short.stem.ids.json").exists());

    let s = ok(dir, &[
        "model", "short.jsonl", "--embeddings", "short.stem", "--min-topic-size", "10", "--diversity", "0.2",
        "-o", "model.json", "--reference", "full.jsonl", "--input-type", "short", "--offline",
    ]);
    assert!(s.contains("diversity"), "{s}");
    let model: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["assignments"].as_array().unwrap().len(), 120);

    fs::write(
        dir.join("grid.toml"),
        "workers = 2\n[dataset]\npath = \"full.jsonl\"\nlabel_field = \"label\"\n[grid]\nmin_topic_sizes = [10]\nrepeats = 1\n[output]\ndir = \"grid\"\n",
    )
    .unwrap();
    let s = ok(dir, &["grid", "--config", "grid.toml", "--offline"]);
    assert!(s.contains("9 records, 9 cells"), "{s}");
    let grid = dir.join("grid");
    let svg = fs::read(grid.join("diversity.svg")).unwrap();
    let summary = fs::read(grid.join("summary.csv")).unwrap();
    fs::remove_file(grid.join("diversity.svg")).unwrap();
    ok(dir, &["report", "grid"]);
    assert_eq!(fs::read(grid.join("diversity.svg")).unwrap(), svg);
    assert_eq!(fs::read(grid.join("summary.csv")).unwrap(), summary);
}

#[test]
fn invalid_config_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "[dataset]\npath = \"x\"\n[grid]\nmmr_values = [0.1]\n").unwrap();
    let out = sumtopic(tmp.path(), &["grid", "--config", "bad.toml", "--offline"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("mmr_values"), "{err}");
}

#[test]
fn failures_exit_nonzero_with_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sumtopic(tmp.path(), &["embed", "missing.jsonl", "-o", "x.stem", "--offline"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));
    let out = sumtopic(tmp.path(), &["report", "nowhere"]);
    assert!(!out.status.success());
    let out = sumtopic(tmp.path(), &["summarize", "x.jsonl", "--variant", "medium", "-o", "y"]);
    assert!(!out.status.success());
}
