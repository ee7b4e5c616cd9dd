use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use super::CorpusError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanStats {
    pub lines_in: u64,
    pub lines_kept: u64,
    /// Bytes written, newline terminators included.
    pub bytes_kept: u64,
}

impl CleanStats {
    pub fn merge(self, other: CleanStats) -> CleanStats {
        CleanStats {
            lines_in: self.lines_in + other.lines_in,
            lines_kept: self.lines_kept + other.lines_kept,
            bytes_kept: self.bytes_kept + other.bytes_kept,
        }
    }
}

fn is_letter(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::UppercaseLetter
            | GeneralCategory::LowercaseLetter
            | GeneralCategory::TitlecaseLetter
            | GeneralCategory::ModifierLetter
            | GeneralCategory::OtherLetter
    )
}

/// Whether a line survives cleaning.
///
/// A line is dropped when it has no letter at all (only digits, punctuation,
/// symbols and separators) or fewer than `min_tokens` whitespace-separated tokens.
pub fn clean_line(line: &str, min_tokens: usize) -> bool {
    line.chars().any(is_letter) && line.split_whitespace().take(min_tokens).count() >= min_tokens
}

/// [`clean_line`] over raw bytes. Errors carry the offset of the first invalid byte.
pub fn clean_line_bytes(line: &[u8], min_tokens: usize) -> Result<bool, usize> {
    match std::str::from_utf8(line) {
        Ok(s) => Ok(clean_line(s, min_tokens)),
        Err(e) => Err(e.valid_up_to()),
    }
}

/// Stream `input` to `output`, keeping exactly the lines accepted by [`clean_line`].
///
/// Line terminators (`\n` or `\r\n`) are normalized to `\n`. `path` only labels errors.
pub fn preprocess_corpus<R: BufRead, W: Write>(
    mut input: R,
    mut output: W,
    min_tokens: usize,
    path: &Path,
) -> Result<CleanStats, CorpusError> {
    if min_tokens == 0 {
        return Err(CorpusError::ZeroMinTokens);
    }
    let mut stats = CleanStats::default();
    let mut offset = 0u64;
    let mut buf = Vec::new();
    let io_err = |offset, source| CorpusError::Io {
        path: path.to_path_buf(),
        offset,
        source,
    };
    loop {
        buf.clear();
        let n = input
            .read_until(b'\n', &mut buf)
            .map_err(|e| io_err(offset, e))?;
        if n == 0 {
            break;
        }
        let mut line = &buf[..];
        if let Some(rest) = line.strip_suffix(b"\n") {
            line = rest;
        }
        if let Some(rest) = line.strip_suffix(b"\r") {
            line = rest;
        }
        stats.lines_in += 1;
        let keep = clean_line_bytes(line, min_tokens).map_err(|bad| CorpusError::InvalidUtf8 {
            path: path.to_path_buf(),
            offset: offset + bad as u64,
        })?;
        if keep {
            output
                .write_all(line)
                .and_then(|_| output.write_all(b"\n"))
                .map_err(|e| io_err(offset, e))?;
            stats.lines_kept += 1;
            stats.bytes_kept += line.len() as u64 + 1;
        }
        offset += n as u64;
    }
    output.flush().map_err(|e| io_err(offset, e))?;
    Ok(stats)
}

/// Clean one file into another.
pub fn preprocess_file(input: &Path, output: &Path, min_tokens: usize) -> Result<CleanStats, CorpusError> {
    let open_err = |path: &Path, source| CorpusError::Io {
        path: path.to_path_buf(),
        offset: 0,
        source,
    };
    let reader = BufReader::new(File::open(input).map_err(|e| open_err(input, e))?);
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| open_err(dir, e))?;
    }
    let writer = BufWriter::new(File::create(output).map_err(|e| open_err(output, e))?);
    preprocess_corpus(reader, writer, min_tokens, input)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(input: &str, min_tokens: usize) -> (String, CleanStats) {
        let mut out = Vec::new();
        let stats = preprocess_corpus(input.as_bytes(), &mut out, min_tokens, Path::new("mem")).unwrap();
        (String::from_utf8(out).unwrap(), stats)
    }

    #[test]
    fn clean_line_cases() {
        assert!(clean_line("one two three four five six", 6));
        assert!(!clean_line("12, 34. 56 78 90 11", 6));
        assert!(!clean_line("one two three four five", 6));
        assert!(!clean_line("", 6));
        assert!(!clean_line("!!! ??? ... --- ,,, ;;;", 6));
        assert!(!clean_line("$ 100 + 200 = 300 %", 1));
        assert!(clean_line("a 1 2 3 4 5", 6));
    }

    #[test]
    fn clean_line_non_latin_scripts() {
        // Ge'ez and Arabic letters are category Lo.
        assert!(clean_line("ሰላም ዓለም እንዴት ነህ ደህና ነኝ", 6));
        assert!(clean_line("مرحبا بك في هذا العالم الجميل", 6));
        // Ethiopic digits and wordspace are not letters.
        assert!(!clean_line("፩ ፪ ፫ ፬ ፭ ፮ ።", 6));
        // Letter-like numbers (Nl) do not count as letters.
        assert!(!clean_line("Ⅰ Ⅱ Ⅲ Ⅳ Ⅴ Ⅵ", 6));
    }

    #[test]
    fn three_line_fixture() {
        let input = "the cat sat on the mat today\n1 2 3 4 5 6 7\nshort line here\n";
        let (out, stats) = run(input, 6);
        assert_eq!(out, "the cat sat on the mat today\n");
        assert_eq!(
            stats,
            CleanStats { lines_in: 3, lines_kept: 1, bytes_kept: 29 }
        );
    }

    #[test]
    fn empty_input() {
        assert_eq!(run("", 6), (String::new(), CleanStats::default()));
    }

    #[test]
    fn all_passing_is_identity() {
        let input = "a b c d e f\ng h i j k l m\n";
        assert_eq!(run(input, 6).0, input);
    }

    #[test]
    fn crlf_and_missing_final_newline() {
        let (out, stats) = run("a b c d e f\r\ng h i j k l", 6);
        assert_eq!(out, "a b c d e f\ng h i j k l\n");
        assert_eq!(stats.lines_kept, 2);
    }

    #[test]
    fn invalid_utf8_reports_offset() {
        let input: &[u8] = b"a b c d e f\nxy\xffz\n";
        let err = preprocess_corpus(input, Vec::new(), 6, Path::new("bad.txt")).unwrap_err();
        match err {
            CorpusError::InvalidUtf8 { offset, .. } => assert_eq!(offset, 14),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_min_tokens_rejected() {
        assert!(matches!(
            preprocess_corpus(&b""[..], Vec::new(), 0, Path::new("x")),
            Err(CorpusError::ZeroMinTokens)
        ));
    }
}
