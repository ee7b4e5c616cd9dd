use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{preprocess_file, CleanStats, CorpusError};
use crate::fingerprint;

/// Language code to script-group label, loaded from a JSON object.
///
/// The set of declared groups is the set of values.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupMap(pub BTreeMap<String, String>);

impl GroupMap {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            offset: 0,
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })
    }

    pub fn group_of(&self, language: &str) -> Result<&str, CorpusError> {
        self.0
            .get(language)
            .map(String::as_str)
            .ok_or_else(|| CorpusError::UnknownLanguage(language.to_owned()))
    }

    pub fn groups(&self) -> BTreeSet<&str> {
        self.0.values().map(String::as_str).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub language: String,
    pub group: String,
    pub line_count: u64,
    pub byte_count: u64,
    /// Fingerprint of the raw file this shard was cleaned from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_fingerprint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub min_tokens: usize,
    pub filters_applied: Vec<String>,
}

impl Preprocessing {
    pub fn standard(min_tokens: usize) -> Self {
        Self {
            min_tokens,
            filters_applied: vec![
                "no_letters".to_owned(),
                format!("min_whitespace_tokens_{min_tokens}"),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub shards: Vec<ShardEntry>,
    pub preprocessing: Preprocessing,
    pub created_at: String,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            offset: 0,
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Structural checks: unique shard paths, groups drawn from `groups`.
    pub fn validate(&self, groups: &GroupMap) -> Result<(), CorpusError> {
        let declared = groups.groups();
        let mut seen = BTreeSet::new();
        for shard in &self.shards {
            if !seen.insert(&shard.path) {
                return Err(CorpusError::Manifest(format!(
                    "shard {} listed more than once",
                    shard.path.display()
                )));
            }
            if !declared.contains(shard.group.as_str()) {
                return Err(CorpusError::Manifest(format!(
                    "shard {} has undeclared group {:?}",
                    shard.path.display(),
                    shard.group
                )));
            }
            let expected = groups.group_of(&shard.language)?;
            if expected != shard.group {
                return Err(CorpusError::Manifest(format!(
                    "shard {} is tagged {:?} but language {:?} maps to {:?}",
                    shard.path.display(),
                    shard.group,
                    shard.language,
                    expected
                )));
            }
        }
        Ok(())
    }

    /// Check recorded line and byte counts against the files on disk.
    pub fn verify_files(&self, base: &Path) -> Result<(), CorpusError> {
        for shard in &self.shards {
            let path = self.resolve(base, shard);
            let bytes = fs::read(&path).map_err(|source| CorpusError::Io {
                path: path.clone(),
                offset: 0,
                source,
            })?;
            let lines = bytes.iter().filter(|&&b| b == b'\n').count() as u64;
            if lines != shard.line_count || bytes.len() as u64 != shard.byte_count {
                return Err(CorpusError::Manifest(format!(
                    "{}: manifest records {} lines / {} bytes, file has {} / {}",
                    path.display(),
                    shard.line_count,
                    shard.byte_count,
                    lines,
                    bytes.len()
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, base: &Path, shard: &ShardEntry) -> PathBuf {
        if shard.path.is_absolute() {
            shard.path.clone()
        } else {
            base.join(&shard.path)
        }
    }

    /// Shards of one group, in manifest order.
    pub fn shards_in_group<'a>(&'a self, group: &'a str) -> impl Iterator<Item = &'a ShardEntry> + 'a {
        self.shards.iter().filter(move |s| s.group == group)
    }

    pub fn groups(&self) -> BTreeSet<&str> {
        self.shards.iter().map(|s| s.group.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardInput {
    pub path: PathBuf,
    pub language: String,
}

/// Clean every input shard into `out_dir/<language>/<file name>` and describe
/// the result. Shards are processed in parallel; entries keep input order.
pub fn clean_shards(
    inputs: &[ShardInput],
    groups: &GroupMap,
    out_dir: &Path,
    min_tokens: usize,
) -> Result<(CorpusManifest, CleanStats), CorpusError> {
    let mut targets = BTreeSet::new();
    let mut plan = Vec::with_capacity(inputs.len());
    for input in inputs {
        let group = groups.group_of(&input.language)?.to_owned();
        let name = input.path.file_name().ok_or_else(|| {
            CorpusError::Manifest(format!("{} has no file name", input.path.display()))
        })?;
        let rel = PathBuf::from(&input.language).join(name);
        if !targets.insert(rel.clone()) {
            return Err(CorpusError::Manifest(format!(
                "two inputs would both be written to {}",
                rel.display()
            )));
        }
        plan.push((input, group, rel));
    }

    let results: Vec<Result<(ShardEntry, CleanStats), CorpusError>> = plan
        .par_iter()
        .map(|(input, group, rel)| {
            let source_fingerprint = fingerprint::of_file(&input.path).map_err(|source| CorpusError::Io {
                path: input.path.clone(),
                offset: 0,
                source,
            })?;
            let stats = preprocess_file(&input.path, &out_dir.join(rel), min_tokens)?;
            Ok((
                ShardEntry {
                    path: rel.clone(),
                    language: input.language.clone(),
                    group: group.clone(),
                    line_count: stats.lines_kept,
                    byte_count: stats.bytes_kept,
                    source_fingerprint: Some(source_fingerprint),
                },
                stats,
            ))
        })
        .collect();

    let mut shards = Vec::with_capacity(results.len());
    let mut total = CleanStats::default();
    for result in results {
        let (entry, stats) = result?;
        total = total.merge(stats);
        shards.push(entry);
    }
    let manifest = CorpusManifest {
        shards,
        preprocessing: Preprocessing::standard(min_tokens),
        created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
    };
    Ok((manifest, total))
}
