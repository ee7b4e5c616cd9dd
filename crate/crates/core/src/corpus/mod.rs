//! Monolingual corpus cleaning, shard manifests, and labeled-data splits.

mod clean;
mod labeled;
mod manifest;

pub use clean::{clean_line, clean_line_bytes, preprocess_corpus, preprocess_file, CleanStats};
pub use labeled::{
    enforce_min_class_size, filter_multilabel, read_labeled_tsv, read_multilabel_tsv,
    stratified_split, write_labeled_tsv, LabeledExample, MultiLabelExample, Split, SplitRatios,
};
pub use manifest::{clean_shards, CorpusManifest, GroupMap, Preprocessing, ShardEntry, ShardInput};

use std::path::PathBuf;

use thiserror::Error;

pub const DEFAULT_MIN_TOKENS: usize = 6;
pub const DEFAULT_MIN_CLASS_SIZE: usize = 200;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: invalid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { path: PathBuf, offset: u64 },
    #[error("{path}: I/O error at byte offset {offset}: {source}")]
    Io {
        path: PathBuf,
        offset: u64,
        #[source]
        source: std::io::Error,
    },
    #[error("min_tokens must be at least 1")]
    ZeroMinTokens,
    #[error("invalid split ratios: {0}")]
    Ratios(String),
    #[error("class {label:?} has {size} examples; at least {needed} are needed for a three-way split")]
    ClassTooSmall {
        label: String,
        size: usize,
        needed: usize,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("language {0:?} has no script group in the group map")]
    UnknownLanguage(String),
}
