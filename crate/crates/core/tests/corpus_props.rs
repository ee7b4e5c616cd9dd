mod common;

use std::collections::BTreeMap;
use std::path::Path;

use common::rng;
use maftprep::corpus::{
    clean_line, preprocess_corpus, stratified_split, CorpusError, LabeledExample, SplitRatios, DEFAULT_MIN_TOKENS,
};
use proptest::prelude::*;
use rand::Rng;

fn clean_bytes(input: &[u8], min_tokens: usize) -> Vec<u8> {
    let mut out = Vec::new();
    preprocess_corpus(input, &mut out, min_tokens, Path::new("mem")).unwrap();
    out
}

#[test]
fn preprocessing_matches_golden_file() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let input = std::fs::read(dir.join("preprocess_50.txt")).unwrap();
    let expected = std::fs::read_to_string(dir.join("preprocess_50.expected.txt")).unwrap();
    assert_eq!(input.iter().filter(|&&b| b == b'\n').count(), 50);
    let out = String::from_utf8(clean_bytes(&input, DEFAULT_MIN_TOKENS)).unwrap();
    assert_eq!(out, expected);
}

#[test]
fn invalid_utf8_reports_offset() {
    let input = b"good line with six tokens here\nbad \xff line\n";
    let err = preprocess_corpus(&input[..], Vec::new(), 6, Path::new("x")).unwrap_err();
    assert!(matches!(err, CorpusError::InvalidUtf8 { offset: 35, .. }), "{err:?}");
}

proptest! {
    #[test]
    fn cleaning_is_idempotent(lines in proptest::collection::vec("[a-c1-3 .!\u{1200}\u{0301}]{0,30}", 0..30), min in 1usize..8) {
        let input: String = lines.iter().map(|l| format!("{l}\n")).collect();
        let once = clean_bytes(input.as_bytes(), min);
        let twice = clean_bytes(&once, min);
        prop_assert_eq!(&once, &twice);
        let kept: Vec<&str> = std::str::from_utf8(&once).unwrap().lines().collect();
        for line in &kept {
            prop_assert!(line.split_whitespace().count() >= min);
            prop_assert!(clean_line(line, min));
        }
        let expected = lines.iter().filter(|l| clean_line(l, min)).count();
        prop_assert_eq!(kept.len(), expected);
    }

    #[test]
    fn split_counts_are_within_one_of_target(seed in any::<u64>(), split_seed in any::<u64>()) {
        let mut r = rng(seed);
        let classes = r.gen_range(1..6);
        let mut examples = Vec::new();
        for c in 0..classes {
            for i in 0..r.gen_range(3..300) {
                examples.push(LabeledExample { label: format!("c{c}"), text: format!("t{c}-{i}") });
            }
        }
        let ratios = SplitRatios::PAPER_DEFAULT;
        let split = stratified_split(examples.clone(), ratios, split_seed).unwrap();
        let mut sizes: BTreeMap<String, usize> = BTreeMap::new();
        for e in &examples {
            *sizes.entry(e.label.clone()).or_default() += 1;
        }
        for (label, counts) in split.class_counts() {
            let n = sizes[&label];
            prop_assert_eq!(counts.iter().sum::<usize>(), n);
            for (count, ratio) in counts.iter().zip(ratios.as_array()) {
                prop_assert!((*count as f64 - ratio * n as f64).abs() <= 1.0 + 1e-9);
            }
        }
        let again = stratified_split(examples, ratios, split_seed).unwrap();
        prop_assert_eq!(again, split);
    }
}
