use std::cmp::Ordering;
use std::io::BufRead;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PieceKind, TokenizerError, UnigramModel};
use crate::lines::{for_each_batch, BATCH_LINES};

/// What an unknown id decodes to.
pub const UNK_REPLACEMENT: &str = "\u{2047}";

/// How uncovered characters become unknown-token emissions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnkMode {
    /// One unknown id per maximal run of uncovered characters.
    #[default]
    FuseRuns,
    /// One unknown id per uncovered character.
    PerChar,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Character ranges `[start, end)` of the normalized text that no piece covered.
    pub unk_spans: Vec<(usize, usize)>,
    /// Number of uncovered characters.
    pub unk_chars: usize,
    /// Sum of the scores of emitted pieces.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnkCounts {
    pub unk_tokens: u64,
    pub total_tokens: u64,
}

impl UnkCounts {
    pub fn merge(self, other: UnkCounts) -> UnkCounts {
        UnkCounts {
            unk_tokens: self.unk_tokens + other.unk_tokens,
            total_tokens: self.total_tokens + other.total_tokens,
        }
    }
}

/// Collapse whitespace runs to one space and drop a single leading space:
/// what a covered text looks like after an encode/decode round trip.
pub fn collapse_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_space = false;
    for c in text.chars() {
        if c.is_whitespace() {
            if !in_space {
                out.push(' ');
            }
            in_space = true;
        } else {
            out.push(c);
            in_space = false;
        }
    }
    match out.strip_prefix(' ') {
        Some(rest) => rest.to_owned(),
        None => out,
    }
}

/// Best segmentation of a suffix. Fewer uncovered characters wins, then higher
/// score. `step` records the first segment: its length and id (`None` = unknown).
#[derive(Clone, Copy)]
struct Best {
    unk: usize,
    score: f64,
    len: usize,
    id: Option<u32>,
}

impl Best {
    fn rank(&self, other: &Best, unk_id: u32) -> Ordering {
        other
            .unk
            .cmp(&self.unk)
            .then(self.score.partial_cmp(&other.score).unwrap_or(Ordering::Equal))
            .then(self.len.cmp(&other.len))
            .then_with(|| other.id.unwrap_or(unk_id).cmp(&self.id.unwrap_or(unk_id)))
    }
}

impl UnigramModel {
    /// Replace each whitespace run with the boundary marker and prepend one
    /// if the text does not already start with it.
    pub fn normalize(&self, text: &str) -> String {
        let mut out = String::with_capacity(text.len() + 3);
        let mut in_space = false;
        for c in text.chars() {
            if c.is_whitespace() {
                if !in_space {
                    out.push(self.boundary());
                }
                in_space = true;
            } else {
                if out.is_empty() && c != self.boundary() {
                    out.push(self.boundary());
                }
                out.push(c);
                in_space = false;
            }
        }
        out
    }

    /// Maximum-likelihood segmentation with the default unknown handling.
    pub fn encode(&self, text: &str) -> TokenSequence {
        self.encode_with(text, UnkMode::default())
    }

    /// Maximum-likelihood segmentation of `normalize(text)`.
    ///
    /// Characters that cannot be covered become unknowns. The objective is
    /// lexicographic: fewest uncovered characters, then highest total piece
    /// score. Equal candidates prefer the longer first piece, then the lower id.
    pub fn encode_with(&self, text: &str, mode: UnkMode) -> TokenSequence {
        let chars: Vec<char> = self.normalize(text).chars().collect();
        self.encode_chars(&chars, mode)
    }

    pub(crate) fn encode_chars(&self, chars: &[char], mode: UnkMode) -> TokenSequence {
        let n = chars.len();
        if n == 0 {
            return TokenSequence::default();
        }
        let unk_id = self.special().unk;
        let pieces = self.pieces();
        let mut best = vec![
            Best {
                unk: 0,
                score: 0.0,
                len: 0,
                id: None,
            };
            n + 1
        ];
        for i in (0..n).rev() {
            let rest = best[i + 1];
            let mut here = Best {
                unk: rest.unk + 1,
                score: rest.score,
                len: 1,
                id: None,
            };
            self.trie.for_each_prefix(&chars[i..], |len, id| {
                let rest = best[i + len];
                let cand = Best {
                    unk: rest.unk,
                    score: pieces[id as usize].score + rest.score,
                    len,
                    id: Some(id),
                };
                if cand.rank(&here, unk_id) == Ordering::Greater {
                    here = cand;
                }
            });
            best[i] = here;
        }

        let mut seq = TokenSequence {
            unk_chars: best[0].unk,
            score: best[0].score,
            ..TokenSequence::default()
        };
        let mut i = 0;
        let mut prev_unknown = false;
        while i < n {
            let step = best[i];
            match step.id {
                Some(id) => {
                    seq.ids.push(id);
                    prev_unknown = false;
                }
                None => {
                    if prev_unknown {
                        seq.unk_spans.last_mut().expect("open span").1 = i + 1;
                    } else {
                        seq.unk_spans.push((i, i + 1));
                    }
                    if mode == UnkMode::PerChar || !prev_unknown {
                        seq.ids.push(unk_id);
                    }
                    prev_unknown = true;
                }
            }
            i += step.len;
        }
        seq
    }

    /// Concatenate pieces, turn boundary markers into spaces and drop one
    /// leading space. Unknown ids become [`UNK_REPLACEMENT`]; other specials vanish.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let unk = self.special().unk;
        let mut out = String::new();
        for (position, &id) in ids.iter().enumerate() {
            let piece = self.piece(id).ok_or(TokenizerError::IdOutOfRange {
                position,
                id,
                size: self.len(),
            })?;
            if id == unk {
                out.push_str(UNK_REPLACEMENT);
            } else if piece.kind == PieceKind::Normal {
                out.push_str(&piece.piece);
            }
        }
        let out = out.replace(self.boundary(), " ");
        Ok(match out.strip_prefix(' ') {
            Some(rest) => rest.to_owned(),
            None => out,
        })
    }

    /// Unknown and total emissions over a batch of lines.
    pub fn count_unks_in<S: AsRef<str> + Sync>(&self, lines: &[S], mode: UnkMode) -> UnkCounts {
        let unk = self.special().unk;
        lines
            .par_iter()
            .map(|line| {
                let seq = self.encode_with(line.as_ref(), mode);
                UnkCounts {
                    unk_tokens: seq.ids.iter().filter(|&&id| id == unk).count() as u64,
                    total_tokens: seq.ids.len() as u64,
                }
            })
            .reduce(UnkCounts::default, UnkCounts::merge)
    }

    /// Unknown and total emissions over every line of `reader`.
    pub fn count_unks<R: BufRead>(&self, reader: R, mode: UnkMode) -> Result<UnkCounts, TokenizerError> {
        let mut total = UnkCounts::default();
        for_each_batch(reader, BATCH_LINES, |batch| {
            total = total.merge(self.count_unks_in(batch, mode));
            Ok::<_, TokenizerError>(())
        })?;
        Ok(total)
    }
}
