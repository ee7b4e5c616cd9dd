//! Drives the command-line binary over the checked-in fixture.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maftprep::tokenizer::UnigramModel;

use super::{write_encoder, ModelShape};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e")
}

pub fn copy_dir(src: &Path, dst: &Path) {
    std::fs::create_dir_all(dst).unwrap();
    for entry in std::fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let to = dst.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &to);
        } else {
            std::fs::copy(entry.path(), to).unwrap();
        }
    }
}

/// Whole words of the raw corpora as boundary-prefixed pieces, every
/// character, and a block of foreign-script pieces no corpus uses.
pub fn build_tokenizer(work: &Path) -> UnigramModel {
    let mut words: BTreeMap<String, usize> = BTreeMap::new();
    let mut chars = std::collections::BTreeSet::new();
    for lang in ["yo", "ha", "am"] {
        let text = std::fs::read_to_string(work.join(format!("raw/{lang}.txt"))).unwrap();
        for w in text.split_whitespace() {
            *words.entry(w.to_owned()).or_default() += 1;
            chars.extend(w.chars());
        }
    }
    let mut ranked: Vec<(String, usize)> = words.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut pieces: Vec<(String, f64)> = vec![("\u{2581}".into(), -2.0)];
    pieces.extend(ranked.iter().take(120).enumerate().map(|(i, (w, _))| (format!("\u{2581}{w}"), -3.0 - i as f64 / 64.0)));
    pieces.extend(chars.iter().map(|c| (c.to_string(), -8.0)));
    pieces.extend(('\u{0410}'..='\u{044F}').map(|c| (c.to_string(), -9.0)));
    pieces.extend(('\u{4E00}'..'\u{4E80}').map(|c| (c.to_string(), -9.5)));
    pieces.dedup_by(|a, b| a.0 == b.0);
    UnigramModel::with_standard_specials(pieces).unwrap()
}

/// Fixture copy plus a generated tokenizer and tied checkpoint.
pub fn prepare_workdir() -> (tempfile::TempDir, UnigramModel) {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path();
    copy_dir(&fixture_dir(), work);
    let model = build_tokenizer(work);
    model.save(&work.join("tokenizer.json")).unwrap();
    let shape = ModelShape {
        vocab: model.len(),
        hidden: 16,
        layers: 2,
        ffn: 32,
        positions: 40,
    };
    write_encoder(&work.join("model.bin"), &shape);
    (dir, model)
}

pub fn run(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maftprep"))
        .args(args)
        .current_dir(work)
        .env_remove("MAFTPREP_OUT_DIR")
        .env_remove("MAFTPREP_THREADS")
        .output()
        .expect("spawn maftprep")
}

pub fn ok(work: &Path, args: &[&str]) -> serde_json::Value {
    let out = run(work, args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("JSON summary on stdout")
}

pub fn pipeline(threads: &str) -> Vec<Vec<&str>> {
    let t = |mut v: Vec<&'static str>| {
        v.splice(0..0, ["--threads", "T", "--out-dir", "out"]);
        v
    };
    let steps = vec![
        t(vec!["clean", "--input", "yo=raw/yo.txt", "--input", "ha=raw/ha.txt", "--input", "am=raw/am.txt", "--groups", "groups.json", "--min-tokens", "6"]),
        t(vec!["count", "--manifest", "out/corpus/manifest.json", "--tokenizer", "tokenizer.json"]),
        t(vec!["select", "--tokenizer", "tokenizer.json", "--freq", "out/freq/latin.tsv", "--freq", "out/freq/geez.tsv", "--strategy", "per-group", "--k", "latin=60", "--k", "geez=40", "--original-topn", "10"]),
        t(vec!["prune-tokenizer", "--tokenizer", "tokenizer.json", "--selection", "out/selection.json"]),
        t(vec!["prune-model", "--checkpoint", "model.bin", "--remap", "out/remap.tsv", "--pruned-tokenizer", "out/tokenizer.pruned.json"]),
        t(vec!["mask", "--manifest", "out/corpus/manifest.json", "--tokenizer", "out/tokenizer.pruned.json", "--seed", "13", "--max-seq-len", "32", "--batch-size", "4"]),
        t(vec!["manifest", "--corpus", "out/corpus/manifest.json", "--tokenizer", "out/tokenizer.pruned.json", "--checkpoint", "out/model.pruned.bin", "--selection", "out/selection.json"]),
        t(vec!["split", "--input", "labels.tsv", "--seed", "5", "--min-class-size", "10"]),
        t(vec!["report-unk", "--tokenizer", "full=tokenizer.json", "--tokenizer", "pruned=out/tokenizer.pruned.json", "--dataset", "yo=ner_yo.conll", "--dataset", "am=ner_am.conll", "--format", "conll"]),
        t(vec!["report-coverage", "--selection", "out/selection.json", "--freq", "out/freq/latin.tsv", "--freq", "out/freq/geez.tsv"]),
        t(vec!["report-size", "--before", "model.bin", "--after", "out/model.pruned.bin"]),
    ];
    steps
        .into_iter()
        .map(|s| s.into_iter().map(|a| if a == "T" { threads } else { a }).collect())
        .collect()
}

pub fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
                continue;
            }
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            let bytes = std::fs::read(&path).unwrap();
            out.insert(rel.clone(), strip_timestamps(&rel, bytes));
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Drop the fields that are allowed to differ between runs.
pub fn strip_timestamps(rel: &str, bytes: Vec<u8>) -> Vec<u8> {
    if rel.ends_with("_report.json") {
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        return serde_json::to_vec(&v["body"]).unwrap();
    }
    if rel.ends_with("corpus/manifest.json") {
        let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        v.as_object_mut().unwrap().remove("created_at");
        return serde_json::to_vec(&v).unwrap();
    }
    bytes
}

