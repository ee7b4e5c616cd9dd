mod common;

use std::collections::BTreeSet;

use maftprep::mlmdata::{chunk_corpus, mask_batch, AdaptConfig, MaskVocab, IGNORE_INDEX, MIN_TAIL_TOKENS};
use proptest::prelude::*;

const BOS: u32 = 0;
const EOS: u32 = 2;
const PAD: u32 = 1;
const MASK: u32 = 99;

fn vocab() -> MaskVocab {
    MaskVocab {
        mask_id: MASK,
        pad_id: PAD,
        unmaskable: [BOS, PAD, EOS, MASK].into_iter().collect(),
        random_pool: (4..60).collect(),
    }
}

proptest! {
    #[test]
    fn chunks_pack_the_stream_in_order(tokens in proptest::collection::vec(4u32..60, 0..600), max in 8usize..70) {
        let chunks = chunk_corpus(tokens.iter().copied(), max, BOS, EOS).unwrap();
        let mut body = Vec::new();
        for (i, c) in chunks.iter().enumerate() {
            prop_assert!(c.len() <= max);
            prop_assert_eq!(c[0], BOS);
            prop_assert_eq!(*c.last().unwrap(), EOS);
            if i + 1 < chunks.len() {
                prop_assert_eq!(c.len(), max);
            }
            body.extend_from_slice(&c[1..c.len() - 1]);
        }
        prop_assert_eq!(&tokens[..body.len()], &body[..]);
        let dropped = tokens.len() - body.len();
        if chunks.len() > 1 || dropped > 0 {
            prop_assert!(dropped < MIN_TAIL_TOKENS);
        }
        if !tokens.is_empty() && tokens.len() <= max - 2 {
            prop_assert_eq!(chunks.len(), 1);
        }
    }

    #[test]
    fn labels_mark_exactly_the_selected_positions(seed in any::<u64>(), rows in proptest::collection::vec(proptest::collection::vec(4u32..60, 1..40), 1..8), rate in 0.0f64..0.9) {
        let chunks: Vec<Vec<u32>> = rows.into_iter().map(|r| {
            let mut c = vec![BOS];
            c.extend(r);
            c.push(EOS);
            c
        }).collect();
        let config = AdaptConfig { mask_rate: rate, ..AdaptConfig::default() };
        let (batch, stats) = mask_batch(&chunks, &config, &vocab(), seed, 0).unwrap();
        let specials: BTreeSet<u32> = [BOS, PAD, EOS, MASK].into_iter().collect();
        let mut selected = 0;
        for (r, chunk) in chunks.iter().enumerate() {
            for j in 0..batch.seq {
                let at = r * batch.seq + j;
                let (input, label, attn) = (batch.input_ids[at], batch.labels[at], batch.attention_mask[at]);
                if j >= chunk.len() {
                    prop_assert_eq!((input, label, attn), (PAD as i32, IGNORE_INDEX, 0));
                    continue;
                }
                prop_assert_eq!(attn, 1);
                let original = chunk[j] as i32;
                if label == IGNORE_INDEX {
                    prop_assert_eq!(input, original);
                } else {
                    selected += 1;
                    prop_assert!(!specials.contains(&chunk[j]));
                    prop_assert_eq!(label, original);
                    prop_assert!(input == MASK as i32 || input == original || (4..60).contains(&input));
                }
            }
        }
        prop_assert_eq!(selected, stats.selected);
        prop_assert_eq!(stats.masked + stats.randomized + stats.kept, stats.selected);
        let (again, _) = mask_batch(&chunks, &config, &vocab(), seed, 0).unwrap();
        prop_assert_eq!(again, batch);
    }
}
