//! Audit reports: UNK counts across tokenizers, vocabulary coverage,
//! model size, and metrics handed back by the adaptation harness.
//!
//! Every report is written as `<name>.json` (source of truth) and
//! `<name>.txt` (aligned table). The JSON file is `{"header": .., "body": ..}`;
//! only the header carries a timestamp, and `header.content_sha256` hashes the
//! serialized body.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, Read};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fingerprint;
use crate::surgery::SizeReport;
use crate::tokenizer::{TokenizerError, UnigramModel, UnkMode};
use crate::vocabselect::{coverage, select_for_coverage, FreqTable, SelectError, VocabSelection};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("tokenizers {first} and {other} use different boundary markers")]
    BoundaryMismatch { first: String, other: String },
    #[error("duplicate {what} name {name:?}")]
    DuplicateName { what: &'static str, name: String },
    #[error("no frequency table for group {0:?}")]
    MissingGroup(String),
    #[error("malformed report {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("invalid metrics: {0}")]
    Metrics(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Select(#[from] SelectError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub created_at: String,
    pub tool: String,
    pub content_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile<T> {
    pub header: ReportHeader,
    pub body: T,
}

pub fn body_json<T: Serialize>(body: &T) -> String {
    serde_json::to_string_pretty(body).expect("report serializes")
}

/// Write `<stem>.json` and `<stem>.txt`.
pub fn write_report<T: Serialize>(stem: &Path, body: &T, text: &str) -> Result<(), ReportError> {
    let body_text = body_json(body);
    let header = ReportHeader {
        created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        tool: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
        content_sha256: fingerprint::of_bytes(body_text.as_bytes()),
    };
    let header_text = serde_json::to_string_pretty(&header).expect("header serializes");
    let json = format!(
        "{{\n  \"header\": {},\n  \"body\": {}\n}}\n",
        indent(&header_text),
        indent(&body_text)
    );
    let io = |path: PathBuf| move |source| ReportError::Io { path, source };
    let json_path = stem.with_extension("json");
    crate::atomic_write(&json_path, json.as_bytes()).map_err(io(json_path.clone()))?;
    let txt_path = stem.with_extension("txt");
    crate::atomic_write(&txt_path, text.as_bytes()).map_err(io(txt_path.clone()))
}

fn indent(text: &str) -> String {
    text.replace('\n', "\n  ")
}

/// Load a report and check that the body still matches its recorded hash.
pub fn read_report<T: DeserializeOwned + Serialize>(path: &Path) -> Result<ReportFile<T>, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let malformed = |reason: String| ReportError::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let file: ReportFile<T> = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    let found = fingerprint::of_bytes(body_json(&file.body).as_bytes());
    if found != file.header.content_sha256 {
        return Err(malformed(format!(
            "body hash {found} does not match header {}",
            file.header.content_sha256
        )));
    }
    Ok(file)
}

/// Render rows as a left-aligned first column and right-aligned others.
pub fn render_table(head: &[String], rows: &[Vec<String>]) -> String {
    let cols = head.len();
    let mut widths: Vec<usize> = head.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut out = String::new();
        for (i, cell) in cells.iter().enumerate().take(cols) {
            let pad = widths[i] - cell.chars().count();
            if i == 0 {
                out.push_str(cell);
                out.extend(std::iter::repeat_n(' ', pad));
            } else {
                out.push_str("  ");
                out.extend(std::iter::repeat_n(' ', pad));
                out.push_str(cell);
            }
        }
        out.truncate(out.trim_end().len());
        out.push('\n');
        out
    };
    let mut out = line(head);
    let rule: usize = widths.iter().sum::<usize>() + 2 * (cols.saturating_sub(1));
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    /// One text per line.
    #[default]
    Lines,
    /// Token in the first column, blank line between sentences.
    Conll,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamedPath {
    pub name: String,
    pub path: PathBuf,
}

impl NamedPath {
    /// Parse `name=path`; a bare path is named after its file stem.
    pub fn parse(arg: &str) -> NamedPath {
        match arg.split_once('=') {
            Some((name, path)) if !name.is_empty() => NamedPath {
                name: name.to_owned(),
                path: PathBuf::from(path),
            },
            _ => {
                let path = PathBuf::from(arg);
                let name = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| arg.to_owned());
                NamedPath { name, path }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnkRow {
    pub tokenizer_name: String,
    pub dataset_name: String,
    pub unk_count: u64,
    pub total_tokens: u64,
    pub unk_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnkReport {
    pub unk_mode: UnkMode,
    pub dataset_format: DatasetFormat,
    pub rows: Vec<UnkRow>,
    /// Artifact name to content fingerprint. Unreadable datasets are absent.
    pub generated_from: BTreeMap<String, String>,
}

fn conll_sentences<R: BufRead>(reader: R) -> std::io::Result<Vec<String>> {
    let mut out = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for line in reader.lines() {
        let line = line?;
        match line.split_whitespace().next() {
            Some(tok) if !line.starts_with("-DOCSTART-") => current.push(tok.to_owned()),
            _ => {
                if !current.is_empty() {
                    out.push(current.join(" "));
                    current.clear();
                }
            }
        }
    }
    if !current.is_empty() {
        out.push(current.join(" "));
    }
    Ok(out)
}

fn read_dataset(path: &Path, format: DatasetFormat) -> Result<(Vec<String>, String), String> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| format!("{}: {e}", path.display()))?;
    let fp = fingerprint::of_bytes(&bytes);
    let text = String::from_utf8(bytes).map_err(|e| format!("{}: invalid UTF-8 at byte {}", path.display(), e.utf8_error().valid_up_to()))?;
    let lines = match format {
        DatasetFormat::Lines => text.lines().map(str::to_owned).collect(),
        DatasetFormat::Conll => conll_sentences(text.as_bytes()).expect("reading from memory"),
    };
    Ok((lines, fp))
}

fn check_unique<'a>(what: &'static str, names: impl Iterator<Item = &'a str>) -> Result<(), ReportError> {
    let mut seen = BTreeSet::new();
    for name in names {
        if !seen.insert(name) {
            return Err(ReportError::DuplicateName {
                what,
                name: name.to_owned(),
            });
        }
    }
    Ok(())
}

/// One row per (tokenizer, dataset), tokenizers outermost. A dataset that
/// cannot be read yields error rows instead of failing the report.
pub fn unk_report(
    tokenizers: &[(String, UnigramModel)],
    datasets: &[NamedPath],
    format: DatasetFormat,
    mode: UnkMode,
) -> Result<UnkReport, ReportError> {
    check_unique("tokenizer", tokenizers.iter().map(|(n, _)| n.as_str()))?;
    check_unique("dataset", datasets.iter().map(|d| d.name.as_str()))?;
    if let Some((first, m0)) = tokenizers.first() {
        if let Some((other, _)) = tokenizers.iter().find(|(_, m)| m.boundary() != m0.boundary()) {
            return Err(ReportError::BoundaryMismatch {
                first: first.clone(),
                other: other.clone(),
            });
        }
    }
    let mut generated_from = BTreeMap::new();
    for (name, model) in tokenizers {
        generated_from.insert(format!("tokenizer:{name}"), model.fingerprint());
    }
    let loaded: Vec<Result<Vec<String>, String>> = datasets
        .par_iter()
        .map(|d| read_dataset(&d.path, format))
        .collect::<Vec<_>>()
        .into_iter()
        .zip(datasets)
        .map(|(r, d)| {
            r.map(|(lines, fp)| {
                generated_from.insert(format!("dataset:{}", d.name), fp);
                lines
            })
        })
        .collect();
    let pairs: Vec<(usize, usize)> = (0..tokenizers.len())
        .flat_map(|t| (0..datasets.len()).map(move |d| (t, d)))
        .collect();
    let rows = pairs
        .par_iter()
        .map(|&(t, d)| {
            let (tok_name, model) = &tokenizers[t];
            let mut row = UnkRow {
                tokenizer_name: tok_name.clone(),
                dataset_name: datasets[d].name.clone(),
                unk_count: 0,
                total_tokens: 0,
                unk_rate: 0.0,
                error: None,
            };
            match &loaded[d] {
                Ok(lines) => {
                    let c = model.count_unks_in(lines, mode);
                    row.unk_count = c.unk_tokens;
                    row.total_tokens = c.total_tokens;
                    row.unk_rate = if c.total_tokens == 0 {
                        0.0
                    } else {
                        c.unk_tokens as f64 / c.total_tokens as f64
                    };
                }
                Err(e) => row.error = Some(e.clone()),
            }
            row
        })
        .collect();
    Ok(UnkReport {
        unk_mode: mode,
        dataset_format: format,
        rows,
        generated_from,
    })
}

impl UnkReport {
    /// Tokenizers as rows, datasets as `#UNK` columns.
    pub fn render(&self) -> String {
        let mut tokenizers: Vec<&str> = Vec::new();
        let mut datasets: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !tokenizers.contains(&r.tokenizer_name.as_str()) {
                tokenizers.push(&r.tokenizer_name);
            }
            if !datasets.contains(&r.dataset_name.as_str()) {
                datasets.push(&r.dataset_name);
            }
        }
        let mut head = vec!["tokenizer".to_owned()];
        head.extend(datasets.iter().map(|d| format!("{d} #UNK")));
        let rows: Vec<Vec<String>> = tokenizers
            .iter()
            .map(|&t| {
                let mut row = vec![t.to_owned()];
                for &d in &datasets {
                    let cell = self
                        .rows
                        .iter()
                        .find(|r| r.tokenizer_name == t && r.dataset_name == d)
                        .map(|r| match r.error {
                            Some(_) => "error".to_owned(),
                            None => r.unk_count.to_string(),
                        })
                        .unwrap_or_default();
                    row.push(cell);
                }
                row
            })
            .collect();
        let mut out = render_table(&head, &rows);
        for r in self.rows.iter().filter(|r| r.error.is_some()) {
            let _ = writeln!(out, "error: {} on {}: {}", r.tokenizer_name, r.dataset_name, r.error.as_deref().unwrap_or(""));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetK {
    pub target: f64,
    pub k: usize,
    pub coverage: f64,
    pub reached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCoverage {
    pub group: String,
    pub total: u64,
    pub unk_mass: u64,
    pub observed_pieces: usize,
    pub selected_observed: usize,
    pub coverage: f64,
    pub targets: Vec<TargetK>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub tokenizer_fingerprint: String,
    pub selection_size: usize,
    pub groups: Vec<GroupCoverage>,
}

/// Coverage of `selection` on each group's table, plus the k each target needs.
pub fn coverage_report(
    selection: &VocabSelection,
    tables: &BTreeMap<String, FreqTable>,
    targets: &[f64],
) -> Result<CoverageReport, ReportError> {
    let keep = selection.keep_set();
    let groups = tables
        .iter()
        .map(|(group, table)| {
            if table.tokenizer_fingerprint() != selection.tokenizer_fingerprint {
                return Err(SelectError::FingerprintMismatch {
                    what: format!("frequency table for group {group}"),
                    expected: selection.tokenizer_fingerprint.clone(),
                    found: table.tokenizer_fingerprint().to_owned(),
                }
                .into());
            }
            if table.vocab_size() != selection.vocab_size {
                return Err(SelectError::VocabMismatch {
                    what: format!("frequency table for group {group}"),
                    expected: selection.vocab_size,
                    found: table.vocab_size(),
                }
                .into());
            }
            let observed = table.ranked_observed();
            Ok(GroupCoverage {
                group: group.clone(),
                total: table.total(),
                unk_mass: table.unk_mass(),
                observed_pieces: observed.len(),
                selected_observed: observed.iter().filter(|id| keep.contains(id)).count(),
                coverage: coverage(table, &keep),
                targets: targets
                    .iter()
                    .map(|&target| {
                        let s = select_for_coverage(table, target);
                        TargetK {
                            target,
                            k: s.k,
                            coverage: s.coverage,
                            reached: s.reached,
                        }
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>, ReportError>>()?;
    Ok(CoverageReport {
        tokenizer_fingerprint: selection.tokenizer_fingerprint.clone(),
        selection_size: selection.len(),
        groups,
    })
}

impl CoverageReport {
    pub fn render(&self) -> String {
        let targets: Vec<f64> = self
            .groups
            .first()
            .map(|g| g.targets.iter().map(|t| t.target).collect())
            .unwrap_or_default();
        let mut head: Vec<String> = ["group", "tokens", "unk", "observed", "selected", "coverage"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        head.extend(targets.iter().map(|t| format!("k@{t}")));
        let rows: Vec<Vec<String>> = self
            .groups
            .iter()
            .map(|g| {
                let mut row = vec![
                    g.group.clone(),
                    g.total.to_string(),
                    g.unk_mass.to_string(),
                    g.observed_pieces.to_string(),
                    g.selected_observed.to_string(),
                    format!("{:.6}", g.coverage),
                ];
                row.extend(g.targets.iter().map(|t| if t.reached { t.k.to_string() } else { format!("{}*", t.k) }));
                row
            })
            .collect();
        let mut out = render_table(&head, &rows);
        let _ = writeln!(out, "selection size: {}", self.selection_size);
        if self.groups.iter().any(|g| g.targets.iter().any(|t| !t.reached)) {
            out.push_str("* target not reachable; all observed pieces counted\n");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReportBody {
    pub before: String,
    pub after: String,
    pub before_fingerprint: String,
    pub after_fingerprint: String,
    #[serde(flatten)]
    pub sizes: SizeReport,
}

impl SizeReportBody {
    pub fn render(&self) -> String {
        let mb = |n: u64| format!("{:.1}M", n as f64 / 1e6);
        let head: Vec<String> = ["checkpoint", "params", "params (M)", "bytes"].iter().map(|s| s.to_string()).collect();
        let rows = vec![
            vec![self.before.clone(), self.sizes.params_before.to_string(), mb(self.sizes.params_before), self.sizes.bytes_before.to_string()],
            vec![self.after.clone(), self.sizes.params_after.to_string(), mb(self.sizes.params_after), self.sizes.bytes_after.to_string()],
        ];
        let mut out = render_table(&head, &rows);
        let _ = writeln!(out, "reduction: {:.4}", self.sizes.reduction_fraction);
        out
    }
}

/// Metrics written by the adaptation harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessMetrics {
    pub run_id: String,
    pub mode: String,
    pub losses: Vec<f64>,
    #[serde(default)]
    pub task_metrics: BTreeMap<String, f64>,
}

impl HarnessMetrics {
    pub const MODES: [&'static str; 3] = ["maft", "laft", "none"];

    pub fn validate(&self) -> Result<(), ReportError> {
        if self.run_id.is_empty() {
            return Err(ReportError::Metrics("empty run_id".into()));
        }
        if !Self::MODES.contains(&self.mode.as_str()) {
            return Err(ReportError::Metrics(format!("unknown mode {:?}", self.mode)));
        }
        if let Some(bad) = self.losses.iter().position(|l| !l.is_finite()) {
            return Err(ReportError::Metrics(format!("loss {bad} is not finite")));
        }
        if let Some((name, _)) = self.task_metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(ReportError::Metrics(format!("task metric {name} is not finite")));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let m: HarnessMetrics = serde_json::from_str(&text).map_err(|e| ReportError::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }
}

/// One row per run: mode, first and last loss, then every task metric.
pub fn render_metrics(runs: &[HarnessMetrics]) -> String {
    let tasks: BTreeSet<&str> = runs.iter().flat_map(|r| r.task_metrics.keys().map(String::as_str)).collect();
    let mut head: Vec<String> = ["run", "mode", "steps", "initial_loss", "final_loss"].iter().map(|s| s.to_string()).collect();
    head.extend(tasks.iter().map(|t| t.to_string()));
    let loss = |l: Option<&f64>| l.map(|l| format!("{l:.4}")).unwrap_or_else(|| "-".into());
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            let mut row = vec![r.run_id.clone(), r.mode.clone(), r.losses.len().to_string(), loss(r.losses.first()), loss(r.losses.last())];
            row.extend(tasks.iter().map(|t| r.task_metrics.get(*t).map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())));
            row
        })
        .collect();
    render_table(&head, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocabselect::Recipe;

    fn model(pieces: &[&str]) -> UnigramModel {
        UnigramModel::with_standard_specials(pieces.iter().map(|p| (p.to_string(), -1.0)).collect()).unwrap()
    }

    #[test]
    fn unk_rows_and_error_entries() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("yo.txt");
        std::fs::write(&data, "ab xy\nab\n").unwrap();
        let full = model(&["▁", "a", "b", "x", "y"]);
        let pruned = model(&["▁", "a", "b"]);
        let datasets = vec![
            NamedPath::parse(&format!("yo={}", data.display())),
            NamedPath::parse(&dir.path().join("missing.txt").display().to_string()),
        ];
        let report = unk_report(
            &[("full".into(), full), ("pruned".into(), pruned)],
            &datasets,
            DatasetFormat::Lines,
            UnkMode::FuseRuns,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 4);
        assert_eq!(report.rows[0].unk_count, 0);
        assert_eq!(report.rows[2].unk_count, 1);
        assert_eq!(report.rows[2].dataset_name, "yo");
        assert!(report.rows[1].error.is_some() && report.rows[3].error.is_some());
        assert_eq!(report.rows[3].dataset_name, "missing");
        assert!(report.generated_from.contains_key("dataset:yo"));
        assert!(!report.generated_from.contains_key("dataset:missing"));
        let text = report.render();
        assert!(text.starts_with("tokenizer  yo #UNK  missing #UNK\n"), "{text}");
        assert!(text.contains("pruned           1         error\n"), "{text}");
    }

    #[test]
    fn conll_sentences_join_first_column() {
        let text = "-DOCSTART- O\n\nEmi O\nni O\n\nOlu B-PER\n";
        assert_eq!(conll_sentences(text.as_bytes()).unwrap(), vec!["Emi ni", "Olu"]);
    }

    #[test]
    fn coverage_report_matches_prefix_sums() {
        let fp = "f";
        let a = FreqTable::from_counts(vec![0, 0, 0, 5, 50, 30, 15, 0], "a", fp, Some(3));
        let b = FreqTable::from_counts(vec![0, 0, 0, 0, 0, 0, 10, 90], "b", fp, Some(3));
        let tables: BTreeMap<String, FreqTable> = [("a".into(), a), ("b".into(), b)].into_iter().collect();
        let selection = VocabSelection {
            keep_ids: vec![0, 1, 2, 3, 4, 7],
            recipe: Recipe::pooled(2, 0),
            achieved_coverage: BTreeMap::new(),
            tokenizer_fingerprint: fp.into(),
            vocab_size: 8,
        };
        let report = coverage_report(&selection, &tables, &[0.5, 0.99]).unwrap();
        assert_eq!(report.groups[0].coverage, 0.5);
        assert_eq!(report.groups[1].coverage, 0.9);
        assert_eq!(report.groups[0].targets[0].k, 1);
        assert!(!report.groups[0].targets[1].reached);
        assert_eq!(report.groups[1].targets[1].k, 2);
        let mut wrong = selection.clone();
        wrong.tokenizer_fingerprint = "g".into();
        assert!(matches!(
            coverage_report(&wrong, &tables, &[]),
            Err(ReportError::Select(SelectError::FingerprintMismatch { .. }))
        ));
    }

    #[test]
    fn report_files_hash_only_the_body() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("r");
        let body = HarnessMetrics {
            run_id: "x".into(),
            mode: "maft".into(),
            losses: vec![2.0, 1.5],
            task_metrics: BTreeMap::new(),
        };
        write_report(&stem, &body, "t\n").unwrap();
        let back: ReportFile<HarnessMetrics> = read_report(&stem.with_extension("json")).unwrap();
        assert_eq!(back.body, body);
        let text = std::fs::read_to_string(stem.with_extension("json")).unwrap();
        std::fs::write(stem.with_extension("json"), text.replace("1.5", "1.25")).unwrap();
        assert!(read_report::<HarnessMetrics>(&stem.with_extension("json")).is_err());
    }

    #[test]
    fn metrics_validation() {
        let mut m = HarnessMetrics {
            run_id: "r".into(),
            mode: "laft".into(),
            losses: vec![3.0],
            task_metrics: [("ner_f1".to_string(), 0.8)].into_iter().collect(),
        };
        m.validate().unwrap();
        let text = render_metrics(std::slice::from_ref(&m));
        assert!(text.contains("ner_f1"));
        m.mode = "full".into();
        assert!(m.validate().is_err());
    }
}
