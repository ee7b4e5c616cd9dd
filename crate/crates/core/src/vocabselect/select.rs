use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FreqTable, SelectError};
use crate::tokenizer::UnigramModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Sum every group's table, take one top-k.
    Pooled,
    /// Top-k per group with its own k, then union.
    PerGroup,
}

/// Where the extra "top-n of the original tokenizer" pieces come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopnBasis {
    /// The n lowest non-special piece ids.
    #[default]
    IdOrder,
    /// The n most frequent non-special pieces of a supplied frequency table.
    Frequency,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recipe {
    pub strategy: Strategy,
    #[serde(default)]
    pub k_per_group: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooled_k: Option<usize>,
    #[serde(default)]
    pub original_topn: usize,
    #[serde(default)]
    pub original_topn_basis: TopnBasis,
    /// Fill a group's budget with unseen pieces when it has fewer than k observed ones.
    #[serde(default)]
    pub pad_unseen: bool,
}

impl Recipe {
    pub fn per_group(k_per_group: BTreeMap<String, usize>, original_topn: usize) -> Self {
        Recipe {
            strategy: Strategy::PerGroup,
            k_per_group,
            pooled_k: None,
            original_topn,
            original_topn_basis: TopnBasis::IdOrder,
            pad_unseen: false,
        }
    }

    pub fn pooled(k: usize, original_topn: usize) -> Self {
        Recipe {
            strategy: Strategy::Pooled,
            k_per_group: BTreeMap::new(),
            pooled_k: Some(k),
            original_topn,
            original_topn_basis: TopnBasis::IdOrder,
            pad_unseen: false,
        }
    }
}

/// A reduced vocabulary: the piece ids to keep and how they were chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabSelection {
    pub keep_ids: Vec<u32>,
    pub recipe: Recipe,
    pub achieved_coverage: BTreeMap<String, f64>,
    pub tokenizer_fingerprint: String,
    pub vocab_size: usize,
}

impl VocabSelection {
    pub fn keep_set(&self) -> BTreeSet<u32> {
        self.keep_ids.iter().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.keep_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep_ids.is_empty()
    }

    pub fn validate(&self) -> Result<(), SelectError> {
        if self.keep_ids.is_empty() {
            return Err(SelectError::EmptySelection);
        }
        if self.keep_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SelectError::Parse {
                path: "selection".into(),
                line: 0,
                reason: "keep_ids must be strictly ascending".into(),
            });
        }
        if let Some(&max) = self.keep_ids.last() {
            if max as usize >= self.vocab_size {
                return Err(SelectError::IdOutOfRange { id: max, size: self.vocab_size });
            }
        }
        Ok(())
    }

    pub fn check_model(&self, model: &UnigramModel) -> Result<(), SelectError> {
        let fp = model.fingerprint();
        if fp != self.tokenizer_fingerprint {
            return Err(SelectError::FingerprintMismatch {
                what: "vocabulary selection".into(),
                expected: fp,
                found: self.tokenizer_fingerprint.clone(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("selection serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self, SelectError> {
        let text = std::fs::read_to_string(path).map_err(|source| SelectError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let sel: VocabSelection = serde_json::from_str(&text).map_err(|e| SelectError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        sel.validate()?;
        Ok(sel)
    }
}

fn ratio(covered: u64, total: u64) -> f64 {
    if total == 0 {
        1.0
    } else {
        covered as f64 / total as f64
    }
}

/// Share of the table's emissions whose piece is in `selected`. Unknown
/// emissions never count as covered. An empty table is fully covered.
pub fn coverage(freq: &FreqTable, selected: &BTreeSet<u32>) -> f64 {
    let covered = selected.iter().map(|&id| freq.effective_count(id)).sum();
    ratio(covered, freq.total())
}

/// The `k` highest-count ids, ties to the lower id; zero-count ids fill the
/// remainder in id order.
pub fn select_top_k(freq: &FreqTable, k: usize) -> BTreeSet<u32> {
    freq.ranked().into_iter().take(k).collect()
}

/// Like [`select_top_k`] but never returns unseen pieces.
pub fn select_top_k_observed(freq: &FreqTable, k: usize) -> BTreeSet<u32> {
    freq.ranked_observed().into_iter().take(k).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageSelection {
    pub k: usize,
    pub ids: BTreeSet<u32>,
    pub coverage: f64,
    /// False when the target is out of reach (unknown mass) and every observed piece was taken.
    pub reached: bool,
}

/// Smallest top-k reaching `target` coverage.
pub fn select_for_coverage(freq: &FreqTable, target: f64) -> CoverageSelection {
    let ranked = freq.ranked_observed();
    let total = freq.total();
    let mut covered = 0u64;
    let mut k = 0;
    while ratio(covered, total) < target && k < ranked.len() {
        covered += freq.effective_count(ranked[k]);
        k += 1;
    }
    let cov = ratio(covered, total);
    CoverageSelection {
        k,
        ids: ranked[..k].iter().copied().collect(),
        coverage: cov,
        reached: cov >= target,
    }
}

/// Union of group selections, the original-tokenizer extras and the specials.
pub fn merge_selections(
    groups: &[BTreeSet<u32>],
    original_topn_ids: &BTreeSet<u32>,
    specials: &BTreeSet<u32>,
) -> Result<BTreeSet<u32>, SelectError> {
    let mut keep: BTreeSet<u32> = groups.iter().flatten().copied().collect();
    keep.extend(original_topn_ids);
    if keep.is_empty() {
        return Err(SelectError::EmptySelection);
    }
    keep.extend(specials);
    Ok(keep)
}

/// The `n` original pieces always carried over, excluding specials.
pub fn original_topn_ids(
    model: &UnigramModel,
    n: usize,
    basis: TopnBasis,
    freq: Option<&FreqTable>,
) -> Result<BTreeSet<u32>, SelectError> {
    if n == 0 {
        return Ok(BTreeSet::new());
    }
    match basis {
        TopnBasis::IdOrder => Ok(model.normal_ids().into_iter().take(n).collect()),
        TopnBasis::Frequency => {
            let freq = freq.ok_or_else(|| SelectError::Parse {
                path: "recipe".into(),
                line: 0,
                reason: "frequency-based top-n needs a frequency table".into(),
            })?;
            check_table(model, freq)?;
            Ok(freq
                .ranked_observed()
                .into_iter()
                .filter(|&id| !model.is_special(id))
                .take(n)
                .collect())
        }
    }
}

fn check_table(model: &UnigramModel, table: &FreqTable) -> Result<(), SelectError> {
    let fp = model.fingerprint();
    if table.tokenizer_fingerprint() != fp {
        return Err(SelectError::FingerprintMismatch {
            what: format!("frequency table for group {:?}", table.group()),
            expected: fp,
            found: table.tokenizer_fingerprint().to_owned(),
        });
    }
    if table.vocab_size() != model.len() {
        return Err(SelectError::VocabMismatch {
            what: format!("frequency table for group {:?}", table.group()),
            expected: model.len(),
            found: table.vocab_size(),
        });
    }
    Ok(())
}

fn pooled_table(tables: &BTreeMap<String, FreqTable>, model: &UnigramModel) -> Result<FreqTable, SelectError> {
    let mut pooled = FreqTable::for_model(model, "pooled");
    for table in tables.values() {
        pooled.merge(table)?;
    }
    Ok(pooled)
}

fn top_k(freq: &FreqTable, k: usize, pad_unseen: bool) -> BTreeSet<u32> {
    if pad_unseen {
        select_top_k(freq, k)
    } else {
        select_top_k_observed(freq, k)
    }
}

/// Select a reduced vocabulary from per-group frequency tables.
pub fn select_strategy(
    tables: &BTreeMap<String, FreqTable>,
    recipe: &Recipe,
    model: &UnigramModel,
    topn_freq: Option<&FreqTable>,
) -> Result<VocabSelection, SelectError> {
    for table in tables.values() {
        check_table(model, table)?;
    }
    let group_sets = match recipe.strategy {
        Strategy::Pooled => {
            let k = recipe.pooled_k.ok_or(SelectError::PooledNeedsK)?;
            vec![top_k(&pooled_table(tables, model)?, k, recipe.pad_unseen)]
        }
        Strategy::PerGroup => {
            if let Some(extra) = recipe.k_per_group.keys().find(|g| !tables.contains_key(*g)) {
                return Err(SelectError::UnknownGroup(extra.clone()));
            }
            tables
                .iter()
                .map(|(group, table)| {
                    let k = *recipe
                        .k_per_group
                        .get(group)
                        .ok_or_else(|| SelectError::MissingK(group.clone()))?;
                    Ok(top_k(table, k, recipe.pad_unseen))
                })
                .collect::<Result<Vec<_>, SelectError>>()?
        }
    };
    let topn = original_topn_ids(model, recipe.original_topn, recipe.original_topn_basis, topn_freq)?;
    let keep = merge_selections(&group_sets, &topn, &model.special_ids())?;
    let achieved_coverage = tables
        .iter()
        .map(|(group, table)| (group.clone(), coverage(table, &keep)))
        .collect();
    Ok(VocabSelection {
        keep_ids: keep.into_iter().collect(),
        recipe: recipe.clone(),
        achieved_coverage,
        tokenizer_fingerprint: model.fingerprint(),
        vocab_size: model.len(),
    })
}

/// Pooled selection with the largest k whose final keep-set does not exceed
/// `budget` ids, for comparisons at equal vocabulary size.
pub fn select_pooled_with_budget(
    tables: &BTreeMap<String, FreqTable>,
    model: &UnigramModel,
    budget: usize,
    original_topn: usize,
    topn_freq: Option<&FreqTable>,
) -> Result<VocabSelection, SelectError> {
    let run = |k| select_strategy(tables, &Recipe::pooled(k, original_topn), model, topn_freq);
    // Keep-set size is non-decreasing in k.
    let (mut lo, mut hi) = (0usize, model.len());
    while lo < hi {
        let mid = lo + (hi - lo + 1) / 2;
        if run(mid)?.len() <= budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    run(lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> FreqTable {
        // a=0:5, b=1:3, c=2:1
        FreqTable::from_counts(vec![5, 3, 1], "g", "fp", None)
    }

    fn set(ids: &[u32]) -> BTreeSet<u32> {
        ids.iter().copied().collect()
    }

    #[test]
    fn coverage_examples() {
        let t = abc();
        assert!((coverage(&t, &set(&[0, 1])) - 8.0 / 9.0).abs() < 1e-15);
        assert_eq!(coverage(&t, &set(&[0, 1, 2])), 1.0);
        assert_eq!(coverage(&t, &set(&[])), 0.0);
        let empty = FreqTable::from_counts(vec![0, 0], "g", "fp", None);
        assert_eq!(coverage(&empty, &set(&[])), 1.0);
    }

    #[test]
    fn coverage_ignores_unknown_mass() {
        let t = FreqTable::from_counts(vec![2, 6, 2], "g", "fp", Some(1));
        assert_eq!(coverage(&t, &set(&[0, 1, 2])), 0.4);
    }

    #[test]
    fn top_k_examples() {
        let t = abc();
        assert_eq!(select_top_k(&t, 2), set(&[0, 1]));
        assert_eq!(select_top_k(&t, 0), set(&[]));
        assert_eq!(select_top_k(&t, 3), set(&[0, 1, 2]));
        assert_eq!(select_top_k(&t, 10), set(&[0, 1, 2]));
        let sparse = FreqTable::from_counts(vec![0, 4, 0, 4], "g", "fp", None);
        assert_eq!(select_top_k(&sparse, 3), set(&[1, 3, 0]));
        assert_eq!(select_top_k_observed(&sparse, 3), set(&[1, 3]));
    }

    #[test]
    fn coverage_target_examples() {
        let t = abc();
        let sel = select_for_coverage(&t, 0.8);
        assert_eq!((sel.k, sel.ids.clone()), (2, set(&[0, 1])));
        assert!(sel.reached);
        assert_eq!(select_for_coverage(&t, 0.0).k, 0);
        assert_eq!(select_for_coverage(&t, 1.0).k, 3);
    }

    #[test]
    fn coverage_target_shortfall() {
        let t = FreqTable::from_counts(vec![5, 3, 1, 0], "g", "fp", Some(2));
        let sel = select_for_coverage(&t, 1.0);
        assert!(!sel.reached);
        assert_eq!(sel.k, 2);
        assert_eq!(sel.coverage, 8.0 / 9.0);
    }

    #[test]
    fn merge_examples() {
        let none = BTreeSet::new();
        let merged = merge_selections(&[set(&[0, 1]), set(&[1, 2]), set(&[2, 3])], &none, &none).unwrap();
        assert_eq!(merged.len(), 4);
        let disjoint = merge_selections(&[set(&[0, 1]), set(&[2, 3, 4])], &none, &none).unwrap();
        assert_eq!(disjoint.len(), 5);
        assert!(matches!(
            merge_selections(&[set(&[])], &none, &set(&[9])),
            Err(SelectError::EmptySelection)
        ));
        let with_specials = merge_selections(&[set(&[5])], &set(&[6]), &set(&[0, 1])).unwrap();
        assert_eq!(with_specials, set(&[0, 1, 5, 6]));
    }
}
