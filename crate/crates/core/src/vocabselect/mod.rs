//! Subword frequency tables, coverage, and reduced-vocabulary selection.

mod freq;
mod select;

pub use freq::{count_frequencies, FreqTable};
pub use select::{
    coverage, merge_selections, original_topn_ids, select_for_coverage, select_pooled_with_budget,
    select_strategy, select_top_k, select_top_k_observed, CoverageSelection, Recipe, Strategy,
    TopnBasis, VocabSelection,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::tokenizer::TokenizerError;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("tokenizer fingerprint mismatch in {what}: expected {expected}, found {found}")]
    FingerprintMismatch {
        what: String,
        expected: String,
        found: String,
    },
    #[error("vocabulary size mismatch in {what}: expected {expected}, found {found}")]
    VocabMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("no k given for group {0:?}")]
    MissingK(String),
    #[error("k given for group {0:?}, which has no frequency table")]
    UnknownGroup(String),
    #[error("pooled selection needs a single k")]
    PooledNeedsK,
    #[error("selection is empty")]
    EmptySelection,
    #[error("piece id {id} out of range for a vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}
