//! Oracles and fixture generators shared by the integration tests.
#![allow(dead_code)]

pub mod e2e;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use maftprep::container::{ContainerWriter, Dtype, Header};
use maftprep::surgery::{META_EMBEDDING, META_HIDDEN_DIM, META_OUTPUT_BIAS, META_TIED, META_VOCAB_SIZE};
use maftprep::tokenizer::{PieceKind, UnigramModel};
use maftprep::vocabselect::FreqTable;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BOUNDARY: char = '\u{2581}';

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Scores are multiples of 1/8 so every sum is exact in f64.
pub fn dyadic_score(rng: &mut impl Rng) -> f64 {
    -(rng.gen_range(1..=64) as f64) / 8.0
}

pub fn model_from(pieces: &[(String, f64)]) -> UnigramModel {
    UnigramModel::with_standard_specials(pieces.to_vec()).expect("toy model")
}

/// A random vocabulary over `alphabet` (plus the boundary marker): some single
/// characters, some multi-character strings, each with a dyadic score.
pub fn random_vocab(rng: &mut impl Rng, alphabet: &[char], size: usize) -> UnigramModel {
    let mut symbols: Vec<char> = alphabet.to_vec();
    symbols.push(BOUNDARY);
    let mut seen = BTreeSet::new();
    let mut pieces = Vec::new();
    let mut attempts = 0;
    while pieces.len() < size && attempts < size * 50 {
        attempts += 1;
        let len = rng.gen_range(1..=4);
        let s: String = (0..len).map(|_| *symbols.choose(rng).unwrap()).collect();
        if seen.insert(s.clone()) {
            pieces.push((s, dyadic_score(rng)));
        }
    }
    model_from(&pieces)
}

/// Exhaustive segmentation search over `normalize(text)`: every split into
/// contiguous segments, each either a normal piece or a single uncovered
/// character. Returns (uncovered characters, best score) under the
/// lexicographic objective.
pub fn brute_force_best(model: &UnigramModel, text: &str) -> (usize, f64) {
    let chars: Vec<char> = model.normalize(text).chars().collect();
    let n = chars.len();
    if n == 0 {
        return (0, 0.0);
    }
    let normal: BTreeMap<String, f64> = model
        .pieces()
        .iter()
        .filter(|p| p.kind == PieceKind::Normal)
        .map(|p| (p.piece.clone(), p.score))
        .collect();
    let mut best: Option<(usize, f64)> = None;
    // Bit i set = a cut after character i.
    for cuts in 0u64..(1u64 << (n - 1)) {
        let mut unk = 0;
        let mut score = 0.0;
        let mut start = 0;
        let mut valid = true;
        for end in 1..=n {
            if end < n && cuts & (1 << (end - 1)) == 0 {
                continue;
            }
            let seg: String = chars[start..end].iter().collect();
            match normal.get(&seg) {
                Some(s) => score += s,
                None if end - start == 1 => unk += 1,
                None => {
                    valid = false;
                    break;
                }
            }
            start = end;
        }
        if !valid {
            continue;
        }
        best = Some(match best {
            None => (unk, score),
            Some((bu, bs)) if unk < bu || (unk == bu && score > bs) => (unk, score),
            Some(b) => b,
        });
    }
    best.expect("all-unknown segmentation is always valid")
}

/// Random words over `alphabet`, joined by random whitespace runs.
pub fn random_text(rng: &mut impl Rng, alphabet: &[char], max_chars: usize) -> String {
    let len = rng.gen_range(0..=max_chars);
    let mut s = String::new();
    for _ in 0..len {
        if rng.gen_bool(0.2) {
            let ws = [' ', ' ', '\t', '\n'];
            s.push(*ws.choose(rng).unwrap());
        } else {
            s.push(*alphabet.choose(rng).unwrap());
        }
    }
    s
}

/// Frequency table over `vocab_size` ids with random counts; id 3 is unknown.
pub fn random_table(rng: &mut impl Rng, vocab_size: usize, group: &str) -> FreqTable {
    let counts: Vec<u64> = (0..vocab_size)
        .map(|_| if rng.gen_bool(0.3) { 0 } else { rng.gen_range(0..20) })
        .collect();
    FreqTable::from_counts(counts, group, "fp", Some(3))
}

/// Sort-everything oracle: ids by (count desc, id asc), first k.
pub fn full_sort_top_k(counts: &[u64], unk: Option<u32>, k: usize) -> BTreeSet<u32> {
    let mut ids: Vec<u32> = (0..counts.len() as u32).collect();
    let eff = |id: u32| if Some(id) == unk { 0 } else { counts[id as usize] };
    ids.sort_by(|&a, &b| eff(b).cmp(&eff(a)).then(a.cmp(&b)));
    ids.into_iter().take(k).collect()
}

pub fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic finite f32 for element `index` of tensor `salt`.
pub fn element(salt: u64, index: u64) -> f32 {
    f32::from_bits((splitmix(salt << 40 ^ index) as u32) & 0x3FFF_FFFF)
}

pub struct ModelShape {
    pub vocab: usize,
    pub hidden: usize,
    pub layers: usize,
    pub ffn: usize,
    pub positions: usize,
}

impl ModelShape {
    pub const XLMR_BASE: ModelShape = ModelShape {
        vocab: 250_002,
        hidden: 768,
        layers: 12,
        ffn: 3072,
        positions: 514,
    };
}

pub const EMBEDDING: &str = "embeddings.word_embeddings.weight";
pub const OUTPUT_BIAS: &str = "lm_head.bias";

/// Tensor names and shapes of an encoder with a tied output head.
pub fn encoder_specs(shape: &ModelShape) -> Vec<(String, Dtype, Vec<usize>)> {
    let (h, f) = (shape.hidden, shape.ffn);
    let mut specs = vec![
        (EMBEDDING.to_owned(), vec![shape.vocab, h]),
        ("embeddings.position_embeddings.weight".into(), vec![shape.positions, h]),
        ("embeddings.token_type_embeddings.weight".into(), vec![1, h]),
        ("embeddings.LayerNorm.weight".into(), vec![h]),
        ("embeddings.LayerNorm.bias".into(), vec![h]),
    ];
    for l in 0..shape.layers {
        let p = format!("encoder.layer.{l}");
        for m in ["query", "key", "value"] {
            specs.push((format!("{p}.attention.self.{m}.weight"), vec![h, h]));
            specs.push((format!("{p}.attention.self.{m}.bias"), vec![h]));
        }
        specs.push((format!("{p}.attention.output.dense.weight"), vec![h, h]));
        specs.push((format!("{p}.attention.output.dense.bias"), vec![h]));
        specs.push((format!("{p}.attention.output.LayerNorm.weight"), vec![h]));
        specs.push((format!("{p}.attention.output.LayerNorm.bias"), vec![h]));
        specs.push((format!("{p}.intermediate.dense.weight"), vec![f, h]));
        specs.push((format!("{p}.intermediate.dense.bias"), vec![f]));
        specs.push((format!("{p}.output.dense.weight"), vec![h, f]));
        specs.push((format!("{p}.output.dense.bias"), vec![h]));
        specs.push((format!("{p}.output.LayerNorm.weight"), vec![h]));
        specs.push((format!("{p}.output.LayerNorm.bias"), vec![h]));
    }
    specs.push(("lm_head.dense.weight".into(), vec![h, h]));
    specs.push(("lm_head.dense.bias".into(), vec![h]));
    specs.push(("lm_head.layer_norm.weight".into(), vec![h]));
    specs.push(("lm_head.layer_norm.bias".into(), vec![h]));
    specs.push((OUTPUT_BIAS.into(), vec![shape.vocab]));
    specs.into_iter().map(|(n, s)| (n, Dtype::F32, s)).collect()
}

/// Stream a synthetic checkpoint to `path`. Element `i` of tensor number `t`
/// is `element(t, i)`, so any row can be recomputed without the file.
pub fn write_encoder(path: &Path, shape: &ModelShape) -> Header {
    let specs = encoder_specs(shape);
    let metadata: BTreeMap<String, String> = [
        (META_VOCAB_SIZE, shape.vocab.to_string()),
        (META_HIDDEN_DIM, shape.hidden.to_string()),
        (META_TIED, "true".to_owned()),
        (META_EMBEDDING, EMBEDDING.to_owned()),
        (META_OUTPUT_BIAS, OUTPUT_BIAS.to_owned()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_owned(), v))
    .collect();
    let header = Header::contiguous(specs, metadata);
    let mut writer = ContainerWriter::create(path, header.clone()).expect("create checkpoint");
    let mut buf = Vec::with_capacity(1 << 20);
    for (t, info) in header.tensors.iter().enumerate() {
        let numel = info.numel() as u64;
        let mut i = 0u64;
        while i < numel {
            buf.clear();
            let end = (i + (1 << 18)).min(numel);
            for j in i..end {
                buf.extend_from_slice(&element(t as u64, j).to_le_bytes());
            }
            writer.write_all(&buf).expect("write tensor");
            i = end;
        }
    }
    writer.finish().expect("finish checkpoint");
    header
}

/// Index of `name` in the generator's tensor order.
pub fn tensor_salt(shape: &ModelShape, name: &str) -> u64 {
    encoder_specs(shape).iter().position(|(n, _, _)| n == name).expect("tensor exists") as u64
}

/// Write `lines` to `path` with a trailing newline each.
pub fn write_lines(path: &Path, lines: &[String]) {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).unwrap();
    }
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text).unwrap();
}
