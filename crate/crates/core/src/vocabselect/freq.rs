use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::SelectError;
use crate::lines::{for_each_batch, BATCH_LINES};
use crate::tokenizer::UnigramModel;

/// Exact per-piece emission counts for one corpus group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreqTable {
    counts: Vec<u64>,
    total: u64,
    group: String,
    tokenizer_fingerprint: String,
    unk_id: Option<u32>,
}

impl FreqTable {
    pub fn new(vocab_size: usize, group: impl Into<String>, tokenizer_fingerprint: impl Into<String>, unk_id: Option<u32>) -> Self {
        FreqTable {
            counts: vec![0; vocab_size],
            total: 0,
            group: group.into(),
            tokenizer_fingerprint: tokenizer_fingerprint.into(),
            unk_id,
        }
    }

    /// An empty table bound to `model`.
    pub fn for_model(model: &UnigramModel, group: impl Into<String>) -> Self {
        Self::new(model.len(), group, model.fingerprint(), Some(model.special().unk))
    }

    /// Build a table from explicit counts; handy for tests and synthetic setups.
    pub fn from_counts(counts: Vec<u64>, group: impl Into<String>, tokenizer_fingerprint: impl Into<String>, unk_id: Option<u32>) -> Self {
        let total = counts.iter().sum();
        FreqTable {
            counts,
            total,
            group: group.into(),
            tokenizer_fingerprint: tokenizer_fingerprint.into(),
            unk_id,
        }
    }

    pub fn add(&mut self, id: u32, n: u64) {
        self.counts[id as usize] += n;
        self.total += n;
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    /// Count used for ranking and coverage: unknown emissions cover nothing.
    pub fn effective_count(&self, id: u32) -> u64 {
        if Some(id) == self.unk_id {
            0
        } else {
            self.count(id)
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn vocab_size(&self) -> usize {
        self.counts.len()
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn tokenizer_fingerprint(&self) -> &str {
        &self.tokenizer_fingerprint
    }

    pub fn unk_id(&self) -> Option<u32> {
        self.unk_id
    }

    pub fn unk_mass(&self) -> u64 {
        self.unk_id.map_or(0, |id| self.count(id))
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group = group.into();
        self
    }

    fn check_compatible(&self, other: &FreqTable) -> Result<(), SelectError> {
        if self.tokenizer_fingerprint != other.tokenizer_fingerprint {
            return Err(SelectError::FingerprintMismatch {
                what: format!("frequency tables {:?} and {:?}", self.group, other.group),
                expected: self.tokenizer_fingerprint.clone(),
                found: other.tokenizer_fingerprint.clone(),
            });
        }
        if self.counts.len() != other.counts.len() {
            return Err(SelectError::VocabMismatch {
                what: format!("frequency tables {:?} and {:?}", self.group, other.group),
                expected: self.counts.len(),
                found: other.counts.len(),
            });
        }
        Ok(())
    }

    /// Add `other`'s counts into `self`. Both must come from the same tokenizer.
    pub fn merge(&mut self, other: &FreqTable) -> Result<(), SelectError> {
        self.check_compatible(other)?;
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }

    /// Ids with a non-zero effective count, by count descending then id ascending.
    pub fn ranked_observed(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = (0..self.counts.len() as u32)
            .filter(|&id| self.effective_count(id) > 0)
            .collect();
        ids.sort_unstable_by(|&a, &b| {
            self.effective_count(b)
                .cmp(&self.effective_count(a))
                .then(a.cmp(&b))
        });
        ids
    }

    /// Every id, by effective count descending then id ascending.
    pub fn ranked(&self) -> Vec<u32> {
        let mut ids = self.ranked_observed();
        let observed: std::collections::HashSet<u32> = ids.iter().copied().collect();
        ids.extend((0..self.counts.len() as u32).filter(|id| !observed.contains(id)));
        ids
    }

    /// Count every piece emitted by `model` over `lines`.
    pub fn add_lines<S: AsRef<str> + Sync>(&mut self, model: &UnigramModel, lines: &[S]) {
        let size = self.counts.len();
        let partial = lines
            .par_iter()
            .fold(
                || vec![0u64; size],
                |mut acc, line| {
                    for id in model.encode(line.as_ref()).ids {
                        acc[id as usize] += 1;
                    }
                    acc
                },
            )
            .reduce(
                || vec![0u64; size],
                |mut a, b| {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                    a
                },
            );
        for (id, n) in partial.into_iter().enumerate() {
            if n > 0 {
                self.add(id as u32, n);
            }
        }
    }

    /// TSV form: a `#` header line, then `piece_id<TAB>piece<TAB>count` for
    /// every non-zero count, by count descending then id ascending.
    pub fn to_tsv(&self, model: &UnigramModel) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# tokenizer_fingerprint={}\tgroup={}\tvocab_size={}\tunk_id={}\ttotal={}",
            self.tokenizer_fingerprint,
            self.group,
            self.counts.len(),
            self.unk_id.map_or_else(|| "none".to_owned(), |u| u.to_string()),
            self.total
        );
        let mut ids: Vec<u32> = (0..self.counts.len() as u32).filter(|&i| self.count(i) > 0).collect();
        ids.sort_unstable_by(|&a, &b| self.count(b).cmp(&self.count(a)).then(a.cmp(&b)));
        for id in ids {
            let piece = model.piece(id).map_or("", |p| p.piece.as_str());
            let _ = writeln!(out, "{id}\t{}\t{}", escape(piece), self.count(id));
        }
        out
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self, SelectError> {
        let parse_err = |line: usize, reason: String| SelectError::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|h| h.strip_prefix("# "))
            .ok_or_else(|| parse_err(1, "missing `# ` header line".into()))?;
        let mut fingerprint = None;
        let mut group = None;
        let mut vocab_size = None;
        let mut unk_id = None;
        let mut total = None;
        for field in header.split('\t') {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| parse_err(1, format!("bad header field {field:?}")))?;
            let num = |v: &str| v.parse::<u64>().map_err(|e| parse_err(1, format!("{key}: {e}")));
            match key {
                "tokenizer_fingerprint" => fingerprint = Some(value.to_owned()),
                "group" => group = Some(value.to_owned()),
                "vocab_size" => vocab_size = Some(num(value)? as usize),
                "unk_id" if value == "none" => unk_id = Some(None),
                "unk_id" => unk_id = Some(Some(num(value)? as u32)),
                "total" => total = Some(num(value)?),
                _ => {}
            }
        }
        let (Some(fingerprint), Some(group), Some(vocab_size), Some(unk_id)) = (fingerprint, group, vocab_size, unk_id) else {
            return Err(parse_err(1, "header needs tokenizer_fingerprint, group, vocab_size, unk_id".into()));
        };
        let mut table = FreqTable::new(vocab_size, group, fingerprint, unk_id);
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let (Some(id), Some(count)) = (cols.first(), cols.last()) else {
                return Err(parse_err(i + 2, "expected three columns".into()));
            };
            let id: u32 = id.parse().map_err(|e| parse_err(i + 2, format!("piece_id: {e}")))?;
            let count: u64 = count.parse().map_err(|e| parse_err(i + 2, format!("count: {e}")))?;
            if cols.len() != 3 || id as usize >= vocab_size {
                return Err(parse_err(i + 2, format!("bad row {line:?}")));
            }
            table.add(id, count);
        }
        if let Some(total) = total {
            if total != table.total {
                return Err(parse_err(1, format!("header total {total} but rows sum to {}", table.total)));
            }
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, SelectError> {
        let text = std::fs::read_to_string(path).map_err(|source| SelectError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_tsv(&text, path)
    }
}

fn escape(piece: &str) -> String {
    let mut out = String::with_capacity(piece.len());
    for c in piece.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

/// Count piece emissions over shards. Shards are counted in parallel and
/// merged by integer addition, so shard order does not matter.
pub fn count_frequencies(shards: &[PathBuf], model: &UnigramModel, group: &str) -> Result<FreqTable, SelectError> {
    let tables: Vec<Result<FreqTable, SelectError>> = shards
        .par_iter()
        .map(|path| {
            let io = |source| SelectError::Io {
                path: path.clone(),
                source,
            };
            let reader = BufReader::new(File::open(path).map_err(io)?);
            count_reader(reader, model, group).map_err(io)
        })
        .collect();
    let mut total = FreqTable::for_model(model, group);
    for table in tables {
        total.merge(&table?)?;
    }
    Ok(total)
}

fn count_reader<R: BufRead>(reader: R, model: &UnigramModel, group: &str) -> std::io::Result<FreqTable> {
    let mut table = FreqTable::for_model(model, group);
    for_each_batch(reader, BATCH_LINES, |batch| {
        table.add_lines(model, batch);
        Ok::<_, std::io::Error>(())
    })?;
    Ok(table)
}
