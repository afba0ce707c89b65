use decal::corruption::{reconstruct, sample_spans, span_corruption_example, CorruptionConfig};
use decal::tokenizer::{decode, encode, is_sentinel, sentinel, EOS_ID};
use decal::train::data::random_tokens;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn splice_back_recovers_the_original() {
    let cfg = CorruptionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let n = rng.gen_range(2..400);
        let doc = random_tokens(n, 200, &mut rng);
        let ex = span_corruption_example(&doc, &cfg, &mut rng).unwrap();
        assert_eq!(reconstruct(&ex.encoder_tokens, &ex.decoder_target).unwrap(), doc);
        assert_eq!(*ex.decoder_target.last().unwrap(), EOS_ID);
        assert_eq!(ex.decoder_input[0], 0);
        assert_eq!(&ex.decoder_input[1..], &ex.decoder_target[..ex.decoder_target.len() - 1]);
    }
}

#[test]
fn realized_noise_rate_is_fifteen_percent() {
    let cfg = CorruptionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut noise, mut total) = (0usize, 0usize);
    for _ in 0..10_000 {
        let doc = random_tokens(256, 26, &mut rng);
        let ex = span_corruption_example(&doc, &cfg, &mut rng).unwrap();
        // target = sentinel/span pairs then eos
        noise += ex.decoder_target.iter().filter(|&&t| !is_sentinel(t) && t != EOS_ID).count();
        total += doc.len();
    }
    let rate = noise as f64 / total as f64;
    assert!((rate - 0.15).abs() <= 0.01, "rate {rate}");
}

#[test]
fn sentinels_appear_in_order() {
    let cfg = CorruptionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let doc = random_tokens(512, 26, &mut rng);
    let ex = span_corruption_example(&doc, &cfg, &mut rng).unwrap();
    let enc: Vec<_> = ex.encoder_tokens.iter().copied().filter(|&t| is_sentinel(t)).collect();
    let dec: Vec<_> = ex.decoder_target.iter().copied().filter(|&t| is_sentinel(t)).collect();
    let want: Vec<_> = (0..enc.len()).map(|k| sentinel(k).unwrap()).collect();
    assert_eq!(enc, want);
    assert_eq!(dec, want);
}

proptest! {
    #[test]
    fn spans_are_disjoint_sorted_and_in_range(n in 2usize..600, seed in any::<u64>()) {
        let cfg = CorruptionConfig::default();
        let spans = sample_spans(n, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (noise, count) = cfg.budget(n);
        prop_assert_eq!(spans.len(), count);
        prop_assert_eq!(spans.iter().map(|s| s.len()).sum::<usize>(), noise);
        for pair in spans.windows(2) {
            // a kept token separates consecutive spans
            prop_assert!(pair[0].end + 1 < pair[1].start);
        }
        prop_assert!(spans.last().unwrap().end < n);
    }

    #[test]
    fn byte_tokenizer_round_trips(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        prop_assert_eq!(decode(&encode(&bytes)).unwrap(), bytes);
    }
}
