//! Property tests for metrics, tokenizer and score mapping.

mod common;

use std::collections::HashMap;

use essay_core::evaluation::{acc, confusion, qwk};
use essay_core::scoring::{ensemble, ScoreScale};
use essay_core::tokenizer::{pieces, Vocabulary, BASE_VOCAB};
use proptest::prelude::*;

fn labels(k: i64) -> impl Strategy<Value = (Vec<i64>, Vec<i64>)> {
    (2usize..60).prop_flat_map(move |n| (prop::collection::vec(0..k, n), prop::collection::vec(0..k, n)))
}

fn kappa(a: &[i64], b: &[i64], min: i64, max: i64) -> Option<f64> {
    let scale = ScoreScale::new(min, max).unwrap();
    qwk(&confusion(a, b, &scale).unwrap()).ok()
}

proptest! {
    #[test]
    fn qwk_is_symmetric((a, b) in labels(6)) {
        match (kappa(&a, &b, 0, 5), kappa(&b, &a, 0, 5)) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x.is_none(), y.is_none()),
        }
    }

    #[test]
    fn qwk_ignores_a_common_shift((a, b) in labels(5), shift in -20i64..20) {
        let sa: Vec<i64> = a.iter().map(|x| x + shift).collect();
        let sb: Vec<i64> = b.iter().map(|x| x + shift).collect();
        match (kappa(&a, &b, 0, 4), kappa(&sa, &sb, shift, 4 + shift)) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x.is_none(), y.is_none()),
        }
    }

    #[test]
    fn qwk_matches_brute_force((a, b) in labels(7)) {
        if let Some(x) = kappa(&a, &b, 0, 6) {
            let want = common::brute_qwk(&a, &b, 0, 6);
            prop_assert!((x - want).abs() < 1e-12, "{} vs {}", x, want);
        }
    }

    #[test]
    fn acc_is_the_confusion_diagonal((a, b) in labels(4)) {
        let t = confusion(&a, &b, &ScoreScale::new(0, 3).unwrap()).unwrap();
        let diag: f64 = (0..t.k).map(|i| t.observed[i * t.k + i]).sum();
        prop_assert!((acc(&a, &b).unwrap() - diag).abs() < 1e-12);
    }

    #[test]
    fn score_round_trip_and_order(min in -5i64..10, span in 1i64..40) {
        let scale = ScoreScale::new(min, min + span).unwrap();
        let mut last = f64::NEG_INFINITY;
        for s in scale.scores() {
            let y = scale.score_to_unit(s).unwrap();
            prop_assert!(y > last && (0.0..=1.0).contains(&y));
            last = y;
            prop_assert_eq!(scale.unit_to_score(y).unwrap(), s);
        }
    }

    #[test]
    fn unit_to_score_is_monotone(mut ys in prop::collection::vec(0.0f64..=1.0, 2..30)) {
        let scale = ScoreScale::new(2, 12).unwrap();
        ys.sort_by(f64::total_cmp);
        let scores: Vec<i64> = ys.iter().map(|&y| scale.unit_to_score(y).unwrap()).collect();
        prop_assert!(scores.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(scores.iter().all(|s| scale.contains(*s)));
    }

    #[test]
    fn ensemble_stays_between_members(raws in prop::collection::vec(0.0f64..=1.0, 1..8)) {
        let scale = ScoreScale::new(1, 6).unwrap();
        let (mean, score) = ensemble(&raws, &scale).unwrap();
        let lo = raws.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo - 1e-15 <= mean && mean <= hi + 1e-15);
        prop_assert!(scale.unit_to_score(lo).unwrap() <= score && score <= scale.unit_to_score(hi).unwrap());
    }
}

/// Straightforward greedy BPE: recount every pair each round.
fn naive_merges(corpus: &[Vec<u8>], target: usize) -> Vec<Vec<u8>> {
    let mut words: Vec<(Vec<Vec<u8>>, u64)> = {
        let mut counts: HashMap<Vec<u8>, u64> = HashMap::new();
        for doc in corpus {
            for p in pieces(doc) {
                *counts.entry(p.to_vec()).or_default() += 1;
            }
        }
        counts.into_iter().map(|(p, c)| (p.iter().map(|&b| vec![b]).collect(), c)).collect()
    };
    let mut known: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut merged = Vec::new();
    while BASE_VOCAB + merged.len() < target {
        let mut counts: HashMap<(Vec<u8>, Vec<u8>), u64> = HashMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *counts.entry((w[0].clone(), w[1].clone())).or_default() += c;
            }
        }
        let best = counts
            .into_iter()
            .filter(|((l, r), _)| !known.contains(&[l.as_slice(), r.as_slice()].concat()))
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((l, r), c)) = best else { break };
        if c < 2 {
            break;
        }
        let joined = [l.as_slice(), r.as_slice()].concat();
        for (syms, _) in &mut words {
            let mut out = Vec::new();
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    out.push(joined.clone());
                    i += 2;
                } else {
                    out.push(syms[i].clone());
                    i += 1;
                }
            }
            *syms = out;
        }
        known.push(joined.clone());
        merged.push(joined);
    }
    merged
}

fn small_corpus() -> impl Strategy<Value = Vec<Vec<u8>>> {
    let byte = prop::sample::select(b"aab bc \nca".to_vec());
    prop::collection::vec(prop::collection::vec(byte, 0..24), 1..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trainer_agrees_with_naive_greedy(corpus in small_corpus(), extra in 0usize..20) {
        let vocab = Vocabulary::train(&corpus, BASE_VOCAB + extra).unwrap();
        let got: Vec<Vec<u8>> = (BASE_VOCAB..vocab.len()).map(|id| vocab.token_bytes(id).unwrap().to_vec()).collect();
        prop_assert_eq!(got, naive_merges(&corpus, BASE_VOCAB + extra));
    }

    #[test]
    fn decode_inverts_encode(corpus in small_corpus(), text in prop::collection::vec(any::<u8>(), 0..200)) {
        let vocab = Vocabulary::train(&corpus, BASE_VOCAB + 16).unwrap();
        let ids = vocab.encode(&text, usize::MAX);
        prop_assert_eq!(vocab.decode(&ids).unwrap(), text);
    }
}
