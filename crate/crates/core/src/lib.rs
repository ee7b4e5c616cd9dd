//! Asset preparation for multilingual adaptive fine-tuning: corpus cleaning,
//! subword frequency analysis, vocabulary reduction, embedding surgery,
//! masked-LM batch generation and audit reports.

pub mod cli;
pub mod container;
pub mod corpus;
pub mod fingerprint;
pub mod lines;
pub mod mlmdata;
pub mod remap;
pub mod report;
pub mod surgery;
pub mod tokenizer;
pub mod vocabselect;

use std::io::{self, Write};
use std::path::Path;

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
