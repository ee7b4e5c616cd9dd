use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CorpusError;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabeledExample {
    pub label: String,
    pub text: String,
}

/// A candidate example before multi-label filtering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiLabelExample {
    pub labels: BTreeSet<String>,
    pub text: String,
}

/// Keep the examples that carry exactly one label.
pub fn filter_multilabel(examples: Vec<MultiLabelExample>) -> Vec<LabeledExample> {
    examples
        .into_iter()
        .filter(|ex| ex.labels.len() == 1)
        .map(|ex| LabeledExample {
            label: ex.labels.into_iter().next().expect("exactly one label"),
            text: ex.text,
        })
        .collect()
}

/// Drop every class with fewer than `min_size` examples. Order of survivors is preserved.
pub fn enforce_min_class_size(
    examples: Vec<LabeledExample>,
    min_size: usize,
) -> (Vec<LabeledExample>, BTreeSet<String>) {
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for ex in &examples {
        *sizes.entry(ex.label.as_str()).or_default() += 1;
    }
    let dropped: BTreeSet<String> = sizes
        .into_iter()
        .filter(|&(_, n)| n < min_size)
        .map(|(label, _)| label.to_owned())
        .collect();
    let kept = examples
        .into_iter()
        .filter(|ex| !dropped.contains(&ex.label))
        .collect();
    (kept, dropped)
}

/// Train/dev/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

const RATIO_SUM_TOLERANCE: f64 = 1e-9;
const TIE_EPSILON: f64 = 1e-9;

impl SplitRatios {
    pub const PAPER_DEFAULT: SplitRatios = SplitRatios {
        train: 0.7,
        dev: 0.1,
        test: 0.2,
    };

    pub fn new(train: f64, dev: f64, test: f64) -> Result<Self, CorpusError> {
        let ratios = SplitRatios { train, dev, test };
        ratios.validate()?;
        Ok(ratios)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let parts = self.as_array();
        if parts.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(CorpusError::Ratios(format!(
                "every ratio must be positive, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > RATIO_SUM_TOLERANCE {
            return Err(CorpusError::Ratios(format!("ratios sum to {sum}, not 1")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.dev, self.test]
    }

    /// Largest-remainder allocation of `n` items; equal remainders go to the
    /// earlier split in train, dev, test order.
    pub fn allocate(&self, n: usize) -> [usize; 3] {
        let quotas = self.as_array().map(|r| r * n as f64);
        let mut counts = [0usize; 3];
        let mut fracs = [0f64; 3];
        for i in 0..3 {
            let floor = (quotas[i] + TIE_EPSILON).floor();
            counts[i] = floor as usize;
            fracs[i] = (quotas[i] - floor).max(0.0);
        }
        let assigned: usize = counts.iter().sum();
        let mut remaining = n.saturating_sub(assigned);
        let mut taken = [false; 3];
        while remaining > 0 {
            let mut best: Option<usize> = None;
            for i in 0..3 {
                if taken[i] {
                    continue;
                }
                match best {
                    Some(b) if fracs[i] <= fracs[b] + TIE_EPSILON => {}
                    _ => best = Some(i),
                }
            }
            let Some(b) = best else { break };
            counts[b] += 1;
            taken[b] = true;
            remaining -= 1;
        }
        // More than three leftover units only happens if the ratios are far off
        // from summing to one, which validation rules out.
        counts[0] += remaining;
        counts
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl Split {
    pub fn parts(&self) -> [&[LabeledExample]; 3] {
        [&self.train, &self.dev, &self.test]
    }

    /// Per-class counts for each split, train/dev/test order.
    pub fn class_counts(&self) -> BTreeMap<String, [usize; 3]> {
        let mut counts: BTreeMap<String, [usize; 3]> = BTreeMap::new();
        for (i, part) in self.parts().into_iter().enumerate() {
            for ex in part {
                counts.entry(ex.label.clone()).or_default()[i] += 1;
            }
        }
        counts
    }
}

/// Stratified three-way split.
///
/// Classes are visited in label order; each class is shuffled with a generator
/// seeded from `seed`, then cut according to [`SplitRatios::allocate`]. The
/// assembled splits are shuffled once more with the same generator.
pub fn stratified_split(
    examples: Vec<LabeledExample>,
    ratios: SplitRatios,
    seed: u64,
) -> Result<Split, CorpusError> {
    ratios.validate()?;
    let mut by_class: BTreeMap<String, Vec<LabeledExample>> = BTreeMap::new();
    for ex in examples {
        by_class.entry(ex.label.clone()).or_default().push(ex);
    }
    if let Some((label, members)) = by_class.iter().find(|(_, m)| m.len() < 3) {
        return Err(CorpusError::ClassTooSmall {
            label: label.clone(),
            size: members.len(),
            needed: 3,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split::default();
    for (_, mut members) in by_class {
        members.shuffle(&mut rng);
        let [n_train, n_dev, _] = ratios.allocate(members.len());
        let test = members.split_off(n_train + n_dev);
        let dev = members.split_off(n_train);
        split.train.extend(members);
        split.dev.extend(dev);
        split.test.extend(test);
    }
    split.train.shuffle(&mut rng);
    split.dev.shuffle(&mut rng);
    split.test.shuffle(&mut rng);
    Ok(split)
}

fn parse_tsv<T>(
    path: &Path,
    mut row: impl FnMut(&str, &str) -> Option<T>,
) -> Result<Vec<T>, CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        offset: 0,
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let parsed = line
            .split_once('\t')
            .and_then(|(label, text)| row(label, text))
            .ok_or_else(|| CorpusError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "expected `label<TAB>text` with non-empty fields".into(),
            })?;
        out.push(parsed);
    }
    Ok(out)
}

/// Read `label<TAB>text` rows.
pub fn read_labeled_tsv(path: &Path) -> Result<Vec<LabeledExample>, CorpusError> {
    parse_tsv(path, |label, text| {
        (!label.is_empty() && !text.trim().is_empty()).then(|| LabeledExample {
            label: label.to_owned(),
            text: text.to_owned(),
        })
    })
}

/// Read `labels<TAB>text` rows where the label column may hold several
/// comma-separated labels.
pub fn read_multilabel_tsv(path: &Path) -> Result<Vec<MultiLabelExample>, CorpusError> {
    parse_tsv(path, |labels, text| {
        let labels: BTreeSet<String> = labels
            .split(',')
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect();
        (!labels.is_empty() && !text.trim().is_empty()).then(|| MultiLabelExample {
            labels,
            text: text.to_owned(),
        })
    })
}

pub fn write_labeled_tsv(path: &Path, examples: &[LabeledExample]) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        offset: 0,
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for ex in examples {
        writeln!(out, "{}\t{}", ex.label, ex.text).map_err(io)?;
    }
    out.flush().map_err(io)
}
