use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::trie::Trie;
use super::{TokenizerError, DEFAULT_BOUNDARY};
use crate::fingerprint;
use crate::remap::{Remap, RemapError};

const FORMAT_VERSION: u32 = 1;
const NORMALIZER: &str = "whitespace-to-boundary; no NFKC";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PieceKind {
    Normal,
    Special,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub piece: String,
    pub score: f64,
    pub kind: PieceKind,
}

impl Piece {
    pub fn normal(piece: impl Into<String>, score: f64) -> Self {
        Piece {
            piece: piece.into(),
            score,
            kind: PieceKind::Normal,
        }
    }

    pub fn special(piece: impl Into<String>) -> Self {
        Piece {
            piece: piece.into(),
            score: 0.0,
            kind: PieceKind::Special,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub unk: u32,
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
    pub mask: u32,
}

impl SpecialIds {
    pub fn all(&self) -> [u32; 5] {
        [self.unk, self.bos, self.eos, self.pad, self.mask]
    }

    fn map(&self, f: impl Fn(u32) -> u32) -> SpecialIds {
        SpecialIds {
            unk: f(self.unk),
            bos: f(self.bos),
            eos: f(self.eos),
            pad: f(self.pad),
            mask: f(self.mask),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    boundary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normalizer: Option<String>,
    special: SpecialIds,
    pieces: Vec<(String, f64, PieceKind)>,
}

/// A unigram subword model. Immutable once built; cheap to share across threads.
#[derive(Debug, Clone)]
pub struct UnigramModel {
    pieces: Vec<Piece>,
    special: SpecialIds,
    boundary: char,
    index: HashMap<String, u32>,
    pub(super) trie: Trie,
}

impl PartialEq for UnigramModel {
    fn eq(&self, other: &Self) -> bool {
        self.pieces == other.pieces && self.special == other.special && self.boundary == other.boundary
    }
}

impl UnigramModel {
    pub fn new(pieces: Vec<Piece>, special: SpecialIds, boundary: char) -> Result<Self, TokenizerError> {
        let invalid = |msg: String| Err(TokenizerError::InvalidModel(msg));
        let mut index = HashMap::with_capacity(pieces.len());
        let mut trie = Trie::new();
        for (id, piece) in pieces.iter().enumerate() {
            if piece.piece.is_empty() {
                return invalid(format!("piece {id} is empty"));
            }
            if index.insert(piece.piece.clone(), id as u32).is_some() {
                return invalid(format!("piece {:?} appears more than once", piece.piece));
            }
            if piece.kind == PieceKind::Normal {
                if !piece.score.is_finite() {
                    return invalid(format!("normal piece {:?} has non-finite score", piece.piece));
                }
                trie.insert(&piece.piece, id as u32);
            }
        }
        for (name, id) in ["unk", "bos", "eos", "pad", "mask"].iter().zip(special.all()) {
            match pieces.get(id as usize) {
                None => return invalid(format!("{name} id {id} is out of range")),
                Some(p) if p.kind != PieceKind::Special => {
                    return invalid(format!("{name} id {id} ({:?}) is not a special piece", p.piece))
                }
                Some(_) => {}
            }
        }
        Ok(UnigramModel {
            pieces,
            special,
            boundary,
            index,
            trie,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn piece(&self, id: u32) -> Option<&Piece> {
        self.pieces.get(id as usize)
    }

    pub fn id_of(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn boundary(&self) -> char {
        self.boundary
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.piece(id).is_some_and(|p| p.kind == PieceKind::Special)
    }

    /// Ids of every special-kind piece, ascending.
    pub fn special_ids(&self) -> BTreeSet<u32> {
        self.kind_ids(PieceKind::Special).collect()
    }

    /// Ids of every normal piece, ascending.
    pub fn normal_ids(&self) -> Vec<u32> {
        self.kind_ids(PieceKind::Normal).collect()
    }

    fn kind_ids(&self, kind: PieceKind) -> impl Iterator<Item = u32> + '_ {
        self.pieces
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.kind == kind)
            .map(|(i, _)| i as u32)
    }

    /// Restrict the inventory to `keep` plus every special piece.
    ///
    /// Survivors keep their scores and original relative order and are
    /// renumbered from zero. The returned remap maps old ids to new ids.
    pub fn prune(&self, keep: &BTreeSet<u32>) -> Result<(UnigramModel, Remap), TokenizerError> {
        if keep.is_empty() {
            return Err(RemapError::Empty.into());
        }
        if let Some(&max) = keep.iter().next_back() {
            if max as usize >= self.len() {
                return Err(RemapError::OutOfRange { id: max, size: self.len() }.into());
            }
        }
        let mut union = keep.clone();
        union.extend(self.special_ids());
        let remap = Remap::from_keep(&union, self.len())?;
        let pieces = remap
            .kept()
            .iter()
            .map(|&old| self.pieces[old as usize].clone())
            .collect();
        let special = self
            .special
            .map(|old| remap.new_id(old).expect("specials are always kept"));
        let model = UnigramModel::new(pieces, special, self.boundary)?;
        Ok((model, remap))
    }

    /// Canonical JSON form, one piece per line.
    pub fn to_json(&self) -> String {
        let mut out = String::with_capacity(self.pieces.len() * 24 + 256);
        let _ = write!(
            out,
            "{{\"version\":{FORMAT_VERSION},\"boundary\":{},\"normalizer\":{},\"special\":{},\"pieces\":[",
            serde_json::to_string(&self.boundary.to_string()).expect("string"),
            serde_json::to_string(NORMALIZER).expect("string"),
            serde_json::to_string(&self.special).expect("special ids"),
        );
        for (i, p) in self.pieces.iter().enumerate() {
            out.push_str(if i == 0 { "\n" } else { ",\n" });
            out.push_str(&serde_json::to_string(&(&p.piece, p.score, p.kind)).expect("piece"));
        }
        out.push_str("\n]}\n");
        out
    }

    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        let file: ModelFile = serde_json::from_str(text)
            .map_err(|e| TokenizerError::InvalidModel(format!("malformed model JSON: {e}")))?;
        if file.version != FORMAT_VERSION {
            return Err(TokenizerError::InvalidModel(format!(
                "unsupported model version {}",
                file.version
            )));
        }
        let mut chars = file.boundary.chars();
        let boundary = match (chars.next(), chars.next()) {
            (Some(c), None) => c,
            _ => {
                return Err(TokenizerError::InvalidModel(format!(
                    "boundary must be a single codepoint, got {:?}",
                    file.boundary
                )))
            }
        };
        let pieces = file
            .pieces
            .into_iter()
            .map(|(piece, score, kind)| Piece { piece, score, kind })
            .collect();
        UnigramModel::new(pieces, file.special, boundary)
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| TokenizerError::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        crate::atomic_write(path, self.to_json().as_bytes()).map_err(|source| TokenizerError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        fingerprint::of_bytes(self.to_json().as_bytes())
    }

    /// A conventional layout: `<s> <pad> </s> <unk>` first, `<mask>` last.
    pub fn with_standard_specials(normal: Vec<(String, f64)>) -> Result<Self, TokenizerError> {
        let mut pieces = vec![
            Piece::special("<s>"),
            Piece::special("<pad>"),
            Piece::special("</s>"),
            Piece::special("<unk>"),
        ];
        pieces.extend(normal.into_iter().map(|(p, s)| Piece::normal(p, s)));
        let mask = pieces.len() as u32;
        pieces.push(Piece::special("<mask>"));
        UnigramModel::new(
            pieces,
            SpecialIds {
                unk: 3,
                bos: 0,
                eos: 2,
                pad: 1,
                mask,
            },
            DEFAULT_BOUNDARY,
        )
    }
}
