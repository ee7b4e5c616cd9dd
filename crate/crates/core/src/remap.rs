//! Old-id to new-id tables produced by vocabulary pruning.
//!
//! The same table drives tokenizer pruning and embedding surgery, so both
//! sides agree on which row a surviving piece lands in. On disk it is a TSV
//! with one `old_id<TAB>new_id` pair per line, ascending by old id.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RemapError {
    #[error("keep-set is empty")]
    Empty,
    #[error("id {id} is out of range for a vocabulary of {size}")]
    OutOfRange { id: u32, size: usize },
    #[error("remap table line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("remap is not injective or not contiguous: {0}")]
    Invalid(String),
}

/// A stable row selection: surviving old ids in ascending order, new id = position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Remap {
    old_size: usize,
    kept: Vec<u32>,
}

impl Remap {
    /// Build a remap keeping `keep` out of a vocabulary of `old_size` ids.
    pub fn from_keep(keep: &BTreeSet<u32>, old_size: usize) -> Result<Self, RemapError> {
        if keep.is_empty() {
            return Err(RemapError::Empty);
        }
        if let Some(&max) = keep.iter().next_back() {
            if max as usize >= old_size {
                return Err(RemapError::OutOfRange { id: max, size: old_size });
            }
        }
        Ok(Self {
            old_size,
            kept: keep.iter().copied().collect(),
        })
    }

    pub fn identity(size: usize) -> Self {
        Self {
            old_size: size,
            kept: (0..size as u32).collect(),
        }
    }

    pub fn old_size(&self) -> usize {
        self.old_size
    }

    pub fn new_size(&self) -> usize {
        self.kept.len()
    }

    /// Surviving old ids, indexed by new id.
    pub fn kept(&self) -> &[u32] {
        &self.kept
    }

    pub fn new_id(&self, old: u32) -> Option<u32> {
        self.kept.binary_search(&old).ok().map(|i| i as u32)
    }

    pub fn old_id(&self, new: u32) -> Option<u32> {
        self.kept.get(new as usize).copied()
    }

    pub fn is_identity(&self) -> bool {
        self.kept.len() == self.old_size
    }

    /// `self` followed by `next`, where `next` is expressed in `self`'s new ids.
    pub fn compose(&self, next: &Remap) -> Result<Remap, RemapError> {
        if next.old_size != self.new_size() {
            return Err(RemapError::Invalid(format!(
                "second remap expects {} ids, first produces {}",
                next.old_size,
                self.new_size()
            )));
        }
        Ok(Remap {
            old_size: self.old_size,
            kept: next.kept.iter().map(|&i| self.kept[i as usize]).collect(),
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::with_capacity(self.kept.len() * 12);
        for (new, old) in self.kept.iter().enumerate() {
            let _ = writeln!(out, "{old}\t{new}");
        }
        out
    }

    /// Parse a TSV table. `old_size` is the size of the source vocabulary.
    pub fn from_tsv(text: &str, old_size: usize) -> Result<Self, RemapError> {
        let mut kept = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse = |s: Option<&str>| -> Result<u32, RemapError> {
                s.and_then(|s| s.parse().ok()).ok_or_else(|| RemapError::Parse {
                    line: lineno + 1,
                    reason: format!("expected `old_id<TAB>new_id`, got {line:?}"),
                })
            };
            let mut cols = line.split('\t');
            let old = parse(cols.next())?;
            let new = parse(cols.next())?;
            if new as usize != kept.len() {
                return Err(RemapError::Invalid(format!(
                    "new id {new} on line {} breaks contiguity",
                    lineno + 1
                )));
            }
            if kept.last().is_some_and(|&prev| prev >= old) {
                return Err(RemapError::Invalid(format!(
                    "old id {old} on line {} is not ascending",
                    lineno + 1
                )));
            }
            if old as usize >= old_size {
                return Err(RemapError::OutOfRange { id: old, size: old_size });
            }
            kept.push(old);
        }
        if kept.is_empty() {
            return Err(RemapError::Empty);
        }
        Ok(Self { old_size, kept })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_relative_order() {
        let keep: BTreeSet<u32> = [4, 0, 3].into_iter().collect();
        let remap = Remap::from_keep(&keep, 5).unwrap();
        assert_eq!(remap.kept(), &[0, 3, 4]);
        assert_eq!(remap.new_id(3), Some(1));
        assert_eq!(remap.new_id(1), None);
        assert_eq!(remap.old_id(2), Some(4));
    }

    #[test]
    fn rejects_empty_and_out_of_range() {
        assert_eq!(Remap::from_keep(&BTreeSet::new(), 3), Err(RemapError::Empty));
        let keep: BTreeSet<u32> = [1, 7].into_iter().collect();
        assert!(matches!(
            Remap::from_keep(&keep, 5),
            Err(RemapError::OutOfRange { id: 7, .. })
        ));
    }

    #[test]
    fn tsv_round_trip() {
        let keep: BTreeSet<u32> = [1, 2, 9].into_iter().collect();
        let remap = Remap::from_keep(&keep, 10).unwrap();
        let text = remap.to_tsv();
        assert_eq!(text, "1\t0\n2\t1\n9\t2\n");
        assert_eq!(Remap::from_tsv(&text, 10).unwrap(), remap);
    }

    #[test]
    fn tsv_rejects_gaps() {
        assert!(Remap::from_tsv("1\t0\n2\t2\n", 5).is_err());
        assert!(Remap::from_tsv("3\t0\n2\t1\n", 5).is_err());
    }

    #[test]
    fn compose_maps_through_both() {
        let first = Remap::from_keep(&[0, 2, 3, 5].into_iter().collect(), 6).unwrap();
        let second = Remap::from_keep(&[1, 3].into_iter().collect(), 4).unwrap();
        assert_eq!(first.compose(&second).unwrap().kept(), &[2, 5]);
    }
}
