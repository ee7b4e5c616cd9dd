//! Masked-language-model training data: sequence packing, seeded masking,
//! batch files and adaptation manifests.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Checkpoint, ContainerError, Tensor};
use crate::corpus::CorpusManifest;
use crate::fingerprint;
use crate::lines::{for_each_batch, BATCH_LINES};
use crate::tokenizer::UnigramModel;

/// Label value at positions that do not contribute to the loss.
pub const IGNORE_INDEX: i32 = -100;
/// Trailing chunks with fewer content tokens than this are dropped.
pub const MIN_TAIL_TOKENS: usize = 8;
pub const MIN_SEQ_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum MlmError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("max_seq_len must be at least {MIN_SEQ_LEN}, got {0}")]
    SeqTooShort(usize),
    #[error("referenced artifact {0} does not exist")]
    DanglingReference(PathBuf),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSplit {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for MaskSplit {
    fn default() -> Self {
        MaskSplit {
            mask: 0.8,
            random: 0.1,
            keep: 0.1,
        }
    }
}

/// Training hyper-parameters carried into adaptation manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub epochs: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gradient_accumulation_steps: usize,
    pub max_seq_len: usize,
    pub mask_rate: f64,
    pub mask_split: MaskSplit,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: 3,
            learning_rate: 5e-5,
            batch_size: 10,
            gradient_accumulation_steps: 1,
            max_seq_len: 256,
            mask_rate: 0.15,
            mask_split: MaskSplit::default(),
        }
    }
}

impl AdaptConfig {
    pub const PRESETS: [&'static str; 6] = ["maft", "maft-afriberta", "ner", "topic", "sentiment", "sentiment-xlmr"];

    /// Named settings. `maft*` are adaptation runs; the rest are downstream fine-tuning.
    pub fn preset(name: &str) -> Result<Self, MlmError> {
        let base = AdaptConfig::default();
        Ok(match name {
            "maft" => base,
            "maft-afriberta" => AdaptConfig { batch_size: 32, ..base },
            "ner" => AdaptConfig { epochs: 50, max_seq_len: 164, ..base },
            "topic" => AdaptConfig { epochs: 25, max_seq_len: 500, ..base },
            "sentiment" => AdaptConfig { epochs: 20, max_seq_len: 128, ..base },
            "sentiment-xlmr" => AdaptConfig {
                epochs: 20,
                max_seq_len: 128,
                learning_rate: 2e-5,
                ..base
            },
            other => return Err(MlmError::UnknownPreset(other.to_owned())),
        })
    }

    /// Checks shared by masking and manifests. `mask_rate` may be 0 here.
    pub fn validate_masking(&self) -> Result<(), MlmError> {
        let s = self.mask_split;
        let parts = [s.mask, s.random, s.keep];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(MlmError::Config(format!("mask_split {parts:?} must be fractions summing to 1")));
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(MlmError::Config(format!("mask_rate {} must be in [0, 1)", self.mask_rate)));
        }
        if self.max_seq_len < MIN_SEQ_LEN {
            return Err(MlmError::SeqTooShort(self.max_seq_len));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), MlmError> {
        self.validate_masking()?;
        if self.mask_rate <= 0.0 {
            return Err(MlmError::Config("mask_rate must be in (0, 1) for training".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.gradient_accumulation_steps == 0 {
            return Err(MlmError::Config("epochs, batch_size and gradient_accumulation_steps must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(MlmError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Greedy packer: `[bos] content.. [eos]`, at most `max_seq_len` ids each.
#[derive(Debug)]
pub struct Chunker {
    bos: u32,
    eos: u32,
    content: usize,
    pending: Vec<u32>,
    emitted: usize,
}

impl Chunker {
    pub fn new(max_seq_len: usize, bos: u32, eos: u32) -> Result<Self, MlmError> {
        if max_seq_len < MIN_SEQ_LEN {
            return Err(MlmError::SeqTooShort(max_seq_len));
        }
        Ok(Chunker {
            bos,
            eos,
            content: max_seq_len - 2,
            pending: Vec::with_capacity(max_seq_len),
            emitted: 0,
        })
    }

    fn wrap(&self, body: &[u32]) -> Vec<u32> {
        let mut out = Vec::with_capacity(body.len() + 2);
        out.push(self.bos);
        out.extend_from_slice(body);
        out.push(self.eos);
        out
    }

    pub fn push(&mut self, tokens: &[u32], out: &mut Vec<Vec<u32>>) {
        for &t in tokens {
            self.pending.push(t);
            if self.pending.len() == self.content {
                out.push(self.wrap(&self.pending));
                self.pending.clear();
                self.emitted += 1;
            }
        }
    }

    /// Emit the trailing partial chunk unless it is shorter than
    /// [`MIN_TAIL_TOKENS`] and at least one chunk was already emitted.
    pub fn finish(mut self, out: &mut Vec<Vec<u32>>) {
        let keep_tail = !self.pending.is_empty() && (self.emitted == 0 || self.pending.len() >= MIN_TAIL_TOKENS);
        if keep_tail {
            out.push(self.wrap(&self.pending));
            self.pending.clear();
        }
    }
}

pub fn chunk_corpus<I: IntoIterator<Item = u32>>(tokens: I, max_seq_len: usize, bos: u32, eos: u32) -> Result<Vec<Vec<u32>>, MlmError> {
    let mut chunker = Chunker::new(max_seq_len, bos, eos)?;
    let tokens: Vec<u32> = tokens.into_iter().collect();
    let mut out = Vec::new();
    chunker.push(&tokens, &mut out);
    chunker.finish(&mut out);
    Ok(out)
}

/// Ids the masker needs to know about.
#[derive(Debug, Clone)]
pub struct MaskVocab {
    pub mask_id: u32,
    pub pad_id: u32,
    /// Never selected for prediction.
    pub unmaskable: BTreeSet<u32>,
    /// Random replacements are drawn uniformly from these.
    pub random_pool: Vec<u32>,
}

impl MaskVocab {
    /// Every special piece (unknown included) is unmaskable; replacements
    /// come from normal pieces.
    pub fn from_model(model: &UnigramModel) -> Self {
        let s = model.special();
        MaskVocab {
            mask_id: s.mask,
            pad_id: s.pad,
            unmaskable: model.special_ids(),
            random_pool: model.normal_ids(),
        }
    }
}

/// Row-major `batch × seq` matrices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub batch: usize,
    pub seq: usize,
    pub input_ids: Vec<i32>,
    pub labels: Vec<i32>,
    pub attention_mask: Vec<i32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskStats {
    pub maskable: u64,
    pub selected: u64,
    pub masked: u64,
    pub randomized: u64,
    pub kept: u64,
}

impl MaskStats {
    pub fn merge(self, o: MaskStats) -> MaskStats {
        MaskStats {
            maskable: self.maskable + o.maskable,
            selected: self.selected + o.selected,
            masked: self.masked + o.masked,
            randomized: self.randomized + o.randomized,
            kept: self.kept + o.kept,
        }
    }
}

impl MaskedBatch {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let shape = vec![self.batch, self.seq];
        let mut ckpt = Checkpoint::default();
        ckpt.tensors.insert("input_ids".into(), Tensor::from_i32(shape.clone(), &self.input_ids));
        ckpt.tensors.insert("labels".into(), Tensor::from_i32(shape.clone(), &self.labels));
        ckpt.tensors.insert("attention_mask".into(), Tensor::from_i32(shape, &self.attention_mask));
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ContainerError> {
        let input = ckpt.get("input_ids")?;
        let (batch, seq) = match input.shape[..] {
            [b, s] => (b, s),
            _ => return Err(ContainerError::Metadata(format!("input_ids must be 2-D, got {:?}", input.shape))),
        };
        Ok(MaskedBatch {
            batch,
            seq,
            input_ids: input.to_i32(),
            labels: ckpt.get("labels")?.to_i32(),
            attention_mask: ckpt.get("attention_mask")?.to_i32(),
        })
    }
}

fn sequence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

struct MaskedRow {
    input: Vec<i32>,
    labels: Vec<i32>,
    stats: MaskStats,
}

fn mask_sequence(chunk: &[u32], config: &AdaptConfig, vocab: &MaskVocab, mut rng: ChaCha8Rng) -> MaskedRow {
    let mut input: Vec<i32> = chunk.iter().map(|&t| t as i32).collect();
    let mut labels = vec![IGNORE_INDEX; chunk.len()];
    let mut stats = MaskStats::default();
    let split = config.mask_split;
    for (j, &tok) in chunk.iter().enumerate() {
        if vocab.unmaskable.contains(&tok) {
            continue;
        }
        stats.maskable += 1;
        if rng.gen::<f64>() >= config.mask_rate {
            continue;
        }
        stats.selected += 1;
        labels[j] = tok as i32;
        let u = rng.gen::<f64>();
        if u < split.mask {
            input[j] = vocab.mask_id as i32;
            stats.masked += 1;
        } else if u < split.mask + split.random && !vocab.random_pool.is_empty() {
            input[j] = vocab.random_pool[rng.gen_range(0..vocab.random_pool.len())] as i32;
            stats.randomized += 1;
        } else {
            stats.kept += 1;
        }
    }
    MaskedRow { input, labels, stats }
}

/// Mask a batch of chunks. Chunk `i` draws from its own generator stream
/// `first_index + i` of `seed`, so results do not depend on scheduling or on
/// how the corpus is cut into batches.
pub fn mask_batch(
    chunks: &[Vec<u32>],
    config: &AdaptConfig,
    vocab: &MaskVocab,
    seed: u64,
    first_index: u64,
) -> Result<(MaskedBatch, MaskStats), MlmError> {
    config.validate_masking()?;
    if chunks.is_empty() {
        return Err(MlmError::Config("cannot mask an empty batch".into()));
    }
    let seq = chunks.iter().map(Vec::len).max().unwrap_or(0);
    let rows: Vec<MaskedRow> = chunks
        .par_iter()
        .enumerate()
        .map(|(i, chunk)| mask_sequence(chunk, config, vocab, sequence_rng(seed, first_index + i as u64)))
        .collect();
    let mut batch = MaskedBatch {
        batch: chunks.len(),
        seq,
        input_ids: Vec::with_capacity(chunks.len() * seq),
        labels: Vec::with_capacity(chunks.len() * seq),
        attention_mask: Vec::with_capacity(chunks.len() * seq),
    };
    let mut stats = MaskStats::default();
    for row in rows {
        let pad = seq - row.input.len();
        batch.attention_mask.extend(std::iter::repeat_n(1, row.input.len()));
        batch.attention_mask.extend(std::iter::repeat_n(0, pad));
        batch.input_ids.extend(row.input);
        batch.input_ids.extend(std::iter::repeat_n(vocab.pad_id as i32, pad));
        batch.labels.extend(row.labels);
        batch.labels.extend(std::iter::repeat_n(IGNORE_INDEX, pad));
        stats = stats.merge(row.stats);
    }
    Ok((batch, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRunSummary {
    pub seed: u64,
    pub sequences: u64,
    pub batches: u64,
    pub stats: MaskStats,
    pub tokenizer_fingerprint: String,
    pub packing: String,
    pub files: Vec<String>,
}

/// Pack each shard of `manifest` greedily and write masked batches of
/// `config.batch_size` sequences as `batch_NNNNNN.bin` containers.
pub fn mask_corpus(
    manifest: &CorpusManifest,
    base: &Path,
    model: &UnigramModel,
    config: &AdaptConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<MaskRunSummary, MlmError> {
    config.validate_masking()?;
    if config.batch_size == 0 {
        return Err(MlmError::Config("batch_size must be positive".into()));
    }
    let vocab = MaskVocab::from_model(model);
    let special = model.special();
    let mut summary = MaskRunSummary {
        seed,
        sequences: 0,
        batches: 0,
        stats: MaskStats::default(),
        tokenizer_fingerprint: model.fingerprint(),
        packing: "greedy-within-shard".into(),
        files: Vec::new(),
    };
    let mut pending: Vec<Vec<u32>> = Vec::new();
    let flush = |pending: &mut Vec<Vec<u32>>, summary: &mut MaskRunSummary, all: bool| -> Result<(), MlmError> {
        while pending.len() >= config.batch_size || (all && !pending.is_empty()) {
            let take = pending.len().min(config.batch_size);
            let chunks: Vec<Vec<u32>> = pending.drain(..take).collect();
            let (batch, stats) = mask_batch(&chunks, config, &vocab, seed, summary.sequences)?;
            let name = format!("batch_{:06}.bin", summary.batches);
            let mut ckpt = batch.to_checkpoint();
            ckpt.metadata.insert("seed".into(), seed.to_string());
            ckpt.metadata.insert("first_sequence".into(), summary.sequences.to_string());
            ckpt.metadata.insert("tokenizer_fingerprint".into(), summary.tokenizer_fingerprint.clone());
            ckpt.save(&out_dir.join(&name))?;
            log::debug!("wrote {name}: {} sequences of up to {} ids", batch.batch, batch.seq);
            summary.files.push(name);
            summary.sequences += chunks.len() as u64;
            summary.batches += 1;
            summary.stats = summary.stats.merge(stats);
        }
        Ok(())
    };
    for shard in &manifest.shards {
        let path = manifest.resolve(base, shard);
        let io = |source| MlmError::Io {
            path: path.clone(),
            source,
        };
        log::info!("masking shard {}", path.display());
        let reader = BufReader::new(File::open(&path).map_err(io)?);
        let mut chunker = Chunker::new(config.max_seq_len, special.bos, special.eos)?;
        for_each_batch(reader, BATCH_LINES, |lines| {
            let encoded: Vec<Vec<u32>> = lines.par_iter().map(|l| model.encode(l).ids).collect();
            for ids in encoded {
                chunker.push(&ids, &mut pending);
            }
            flush(&mut pending, &mut summary, false)
        })
        .map_err(|e| match e {
            MlmError::Io { source, .. } => io(source),
            other => other,
        })?;
        chunker.finish(&mut pending);
    }
    flush(&mut pending, &mut summary, true)?;
    Ok(summary)
}

impl From<std::io::Error> for MlmError {
    fn from(source: std::io::Error) -> Self {
        MlmError::Io {
            path: PathBuf::new(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: PathBuf,
    pub fingerprint: String,
}

impl ArtifactRef {
    pub fn of(path: &Path) -> Result<Self, MlmError> {
        if !path.exists() {
            return Err(MlmError::DanglingReference(path.to_path_buf()));
        }
        let fingerprint = fingerprint::of_file(path).map_err(|source| MlmError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(ArtifactRef {
            path: path.to_path_buf(),
            fingerprint,
        })
    }
}

/// What the adaptation harness consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptManifest {
    pub schema: String,
    /// `maft` for several languages, `laft` for exactly one.
    pub mode: String,
    pub languages: Vec<String>,
    pub config: AdaptConfig,
    pub corpus_manifest: ArtifactRef,
    pub shards: Vec<ArtifactRef>,
    pub tokenizer: ArtifactRef,
    pub checkpoint: ArtifactRef,
    pub selection: ArtifactRef,
    pub packing: String,
}

pub const MANIFEST_SCHEMA: &str = "maftprep.adapt-manifest/1";

/// Bind corpus shards, tokenizer, checkpoint and selection to a training config.
pub fn emit_manifest(
    config: &AdaptConfig,
    corpus_manifest: &Path,
    tokenizer: &Path,
    checkpoint: &Path,
    selection: &Path,
) -> Result<AdaptManifest, MlmError> {
    config.validate()?;
    let corpus_ref = ArtifactRef::of(corpus_manifest)?;
    let corpus = CorpusManifest::load(corpus_manifest).map_err(|e| MlmError::Config(e.to_string()))?;
    let base = corpus_manifest.parent().unwrap_or(Path::new("."));
    let shards = corpus
        .shards
        .iter()
        .map(|s| ArtifactRef::of(&corpus.resolve(base, s)))
        .collect::<Result<Vec<_>, _>>()?;
    let languages: Vec<String> = corpus
        .shards
        .iter()
        .map(|s| s.language.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    Ok(AdaptManifest {
        schema: MANIFEST_SCHEMA.into(),
        mode: if languages.len() == 1 { "laft" } else { "maft" }.into(),
        languages,
        config: config.clone(),
        corpus_manifest: corpus_ref,
        shards,
        tokenizer: ArtifactRef::of(tokenizer)?,
        checkpoint: ArtifactRef::of(checkpoint)?,
        selection: ArtifactRef::of(selection)?,
        packing: "greedy-within-shard".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BOS: u32 = 0;
    const EOS: u32 = 2;

    #[test]
    fn chunking_examples() {
        // max 8: 6 content tokens per chunk; the 4-token tail is below the floor.
        let chunks = chunk_corpus(10..20, 8, BOS, EOS).unwrap();
        assert_eq!(chunks, vec![vec![0, 10, 11, 12, 13, 14, 15, 2]]);
        assert!(chunk_corpus(std::iter::empty(), 8, BOS, EOS).unwrap().is_empty());
        let single = chunk_corpus(10..13, 256, BOS, EOS).unwrap();
        assert_eq!(single, vec![vec![0, 10, 11, 12, 2]]);
        assert!(matches!(chunk_corpus(0..3, 7, BOS, EOS), Err(MlmError::SeqTooShort(7))));
    }

    #[test]
    fn long_tail_is_kept() {
        let chunks = chunk_corpus(100..125, 12, BOS, EOS).unwrap();
        // 10 content per chunk: 10 + 10 + 5 (< 8, dropped)
        assert_eq!(chunks.len(), 2);
        let chunks = chunk_corpus(100..128, 12, BOS, EOS).unwrap();
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[2].len(), 10);
    }

    fn vocab() -> MaskVocab {
        MaskVocab {
            mask_id: 99,
            pad_id: 1,
            unmaskable: [0, 1, 2, 99].into_iter().collect(),
            random_pool: (4..50).collect(),
        }
    }

    #[test]
    fn zero_rate_changes_nothing() {
        let config = AdaptConfig { mask_rate: 0.0, ..AdaptConfig::default() };
        let chunks = vec![vec![0, 5, 6, 7, 2], vec![0, 8, 2]];
        let (batch, stats) = mask_batch(&chunks, &config, &vocab(), 1, 0).unwrap();
        assert_eq!(batch.input_ids, vec![0, 5, 6, 7, 2, 0, 8, 2, 1, 1]);
        assert!(batch.labels.iter().all(|&l| l == IGNORE_INDEX));
        assert_eq!(batch.attention_mask, vec![1, 1, 1, 1, 1, 1, 1, 1, 0, 0]);
        assert_eq!(stats.selected, 0);
    }

    #[test]
    fn only_specials_stay_unmasked() {
        let config = AdaptConfig { mask_rate: 0.99, ..AdaptConfig::default() };
        let (batch, stats) = mask_batch(&[vec![0, 2, 1]], &config, &vocab(), 3, 0).unwrap();
        assert_eq!(batch.input_ids, vec![0, 2, 1]);
        assert!(batch.labels.iter().all(|&l| l == IGNORE_INDEX));
        assert_eq!(stats.maskable, 0);
    }

    #[test]
    fn batching_does_not_change_masks() {
        let config = AdaptConfig::default();
        let chunks: Vec<Vec<u32>> = (0..6).map(|i| (0..40).map(|j| 4 + (i * 7 + j) % 40).collect()).collect();
        let (whole, _) = mask_batch(&chunks, &config, &vocab(), 11, 0).unwrap();
        let (a, _) = mask_batch(&chunks[..2], &config, &vocab(), 11, 0).unwrap();
        let (b, _) = mask_batch(&chunks[2..], &config, &vocab(), 11, 2).unwrap();
        let mut joined = a.input_ids.clone();
        joined.extend(&b.input_ids);
        assert_eq!(whole.input_ids, joined);
        let (other, _) = mask_batch(&chunks, &config, &vocab(), 12, 0).unwrap();
        assert_ne!(whole.input_ids, other.input_ids);
    }

    #[test]
    fn presets() {
        let maft = AdaptConfig::preset("maft").unwrap();
        assert_eq!((maft.epochs, maft.learning_rate, maft.batch_size), (3, 5e-5, 10));
        assert_eq!(AdaptConfig::preset("maft-afriberta").unwrap().batch_size, 32);
        let ner = AdaptConfig::preset("ner").unwrap();
        assert_eq!((ner.epochs, ner.max_seq_len), (50, 164));
        let topic = AdaptConfig::preset("topic").unwrap();
        assert_eq!((topic.epochs, topic.max_seq_len), (25, 500));
        let senti = AdaptConfig::preset("sentiment").unwrap();
        assert_eq!((senti.epochs, senti.max_seq_len), (20, 128));
        assert_eq!(AdaptConfig::preset("sentiment-xlmr").unwrap().learning_rate, 2e-5);
        assert!(AdaptConfig::preset("pos").is_err());
        for name in AdaptConfig::PRESETS {
            AdaptConfig::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn config_validation() {
        let bad_split = AdaptConfig {
            mask_split: MaskSplit { mask: 0.8, random: 0.1, keep: 0.2 },
            ..AdaptConfig::default()
        };
        assert!(bad_split.validate().is_err());
        assert!(AdaptConfig { mask_rate: 1.0, ..AdaptConfig::default() }.validate().is_err());
        assert!(AdaptConfig { mask_rate: 0.0, ..AdaptConfig::default() }.validate().is_err());
        assert!(AdaptConfig { mask_rate: 0.0, ..AdaptConfig::default() }.validate_masking().is_ok());
    }

    #[test]
    fn batch_container_round_trip() {
        let (batch, _) = mask_batch(&[vec![0, 5, 6, 2]], &AdaptConfig::default(), &vocab(), 5, 0).unwrap();
        let ckpt = batch.to_checkpoint();
        assert_eq!(MaskedBatch::from_checkpoint(&ckpt).unwrap(), batch);
    }
}
