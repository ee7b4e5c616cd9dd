//! Unigram subword model: loading, Viterbi segmentation, decoding and pruning.

mod model;
mod trie;
mod viterbi;

pub use model::{Piece, PieceKind, SpecialIds, UnigramModel};
pub use viterbi::{collapse_whitespace, TokenSequence, UnkCounts, UnkMode, UNK_REPLACEMENT};

use std::path::PathBuf;

use thiserror::Error;

use crate::remap::RemapError;

pub const DEFAULT_BOUNDARY: char = '\u{2581}';

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("id {id} at position {position} is out of range for a vocabulary of {size}")]
    IdOutOfRange { position: usize, id: u32, size: usize },
    #[error(transparent)]
    Remap(#[from] RemapError),
}

impl From<std::io::Error> for TokenizerError {
    fn from(source: std::io::Error) -> Self {
        TokenizerError::Io {
            path: PathBuf::new(),
            source,
        }
    }
}
