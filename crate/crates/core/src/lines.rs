//! Batched line reading for parallel per-line work.

use std::io::{self, BufRead};

/// Lines handed to workers at a time.
pub const BATCH_LINES: usize = 4096;

/// Read `reader` in batches of up to `batch` lines (terminators stripped) and
/// call `f` on each batch in order.
pub fn for_each_batch<R, E, F>(mut reader: R, batch: usize, mut f: F) -> Result<(), E>
where
    R: BufRead,
    E: From<io::Error>,
    F: FnMut(&[String]) -> Result<(), E>,
{
    let mut lines = Vec::with_capacity(batch);
    loop {
        lines.clear();
        while lines.len() < batch {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                break;
            }
            if line.ends_with('\n') {
                line.pop();
                if line.ends_with('\r') {
                    line.pop();
                }
            }
            lines.push(line);
        }
        if lines.is_empty() {
            return Ok(());
        }
        f(&lines)?;
        if lines.len() < batch {
            return Ok(());
        }
    }
}
