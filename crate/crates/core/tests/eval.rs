use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sed_core::corpus::{TokenSeq, TokenizerMode, Vocab, PAD_ID};
use sed_core::eval::{proxy_nll, unigram_entropy, NGramScorer};
use sed_core::synthetic::desk_corpus;

fn desk() -> (Vec<usize>, Vec<usize>, usize) {
    let text = desk_corpus(1500, 0);
    let vocab = Vocab::build(&text, 256, TokenizerMode::Char).unwrap();
    let ids = vocab.encode(&text).0;
    let cut = ids.len() * 9 / 10;
    (ids[..cut].to_vec(), ids[cut..].to_vec(), vocab.size())
}

fn windows(ids: &[usize], len: usize) -> Vec<TokenSeq> {
    ids.chunks_exact(len).map(|c| TokenSeq(c.to_vec())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn entropy_lies_between_zero_and_ln_v(
        seqs in proptest::collection::vec(proptest::collection::vec(1usize..50, 1..30), 1..10),
    ) {
        let seqs: Vec<TokenSeq> = seqs.into_iter().map(TokenSeq).collect();
        let h = unigram_entropy(&seqs).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (50f64).ln() + 1e-12);
    }
}

#[test]
fn probabilities_sum_to_one_in_random_contexts() {
    let (train, _, v) = desk();
    let scorer = NGramScorer::train(&[TokenSeq(train)], v, 3, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let len = rng.random_range(0..4);
        let ctx: Vec<usize> = (0..len).map(|_| rng.random_range(1..v)).collect();
        let total: f64 = (0..v).map(|w| scorer.prob(&ctx, w)).sum();
        assert!((total - 1.0).abs() < 1e-9, "{ctx:?}: {total}");
        assert_eq!(scorer.prob(&ctx, PAD_ID), 0.0);
    }
}

#[test]
fn corruption_strictly_raises_nll() {
    let (train, validation, v) = desk();
    let scorer = NGramScorer::train(&[TokenSeq(train)], v, 3, 0.1).unwrap();
    let clean = windows(&validation, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut last = proxy_nll(&clean, &scorer).unwrap().mean;
    for rate in [0.1, 0.3, 0.6] {
        let corrupted: Vec<TokenSeq> = clean
            .iter()
            .map(|s| {
                TokenSeq(
                    s.0.iter()
                        .map(|&t| if rng.random::<f64>() < rate { rng.random_range(1..v) } else { t })
                        .collect(),
                )
            })
            .collect();
        let nll = proxy_nll(&corrupted, &scorer).unwrap().mean;
        assert!(nll > last, "rate {rate}: {nll} <= {last}");
        last = nll;
    }
}

#[test]
fn training_text_beats_random_text() {
    let (train, _, v) = desk();
    let verbatim = windows(&train, 64)[..20].to_vec();
    let scorer = NGramScorer::train(&[TokenSeq(train)], v, 3, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let random: Vec<TokenSeq> =
        (0..20).map(|_| TokenSeq((0..64).map(|_| rng.random_range(1..v)).collect())).collect();
    assert!(proxy_nll(&verbatim, &scorer).unwrap().mean < proxy_nll(&random, &scorer).unwrap().mean);
}

#[test]
fn heavy_smoothing_scores_random_text_near_ln_support() {
    let (train, _, v) = desk();
    let scorer = NGramScorer::train(&[TokenSeq(train)], v, 3, 1e4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let random: Vec<TokenSeq> =
        (0..50).map(|_| TokenSeq((0..64).map(|_| rng.random_range(1..v)).collect())).collect();
    let nll = proxy_nll(&random, &scorer).unwrap().mean;
    let target = ((v - 1) as f64).ln();
    assert!((nll / target - 1.0).abs() < 0.05, "{nll} vs {target}");
}
