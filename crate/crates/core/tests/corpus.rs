//! Corpus generation, splitting and file format properties.

use std::collections::HashSet;

use neuronmoe::corpus::{
    bilingual_specs, gen_corpus, load_corpus, parse_corpus, render_corpus, save_corpus, split_corpus, LanguageSpec,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_stratified_disjoint_and_complete(
        per_language in 2usize..40,
        fraction in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let corpus = gen_corpus(&bilingual_specs(64), 64, per_language, 4, seed).unwrap();
        let (train, eval) = split_corpus(&corpus, fraction, seed).unwrap();
        let train_ids: HashSet<u64> = train.samples.iter().map(|s| s.id).collect();
        let eval_ids: HashSet<u64> = eval.samples.iter().map(|s| s.id).collect();
        prop_assert!(train_ids.is_disjoint(&eval_ids));
        prop_assert_eq!(train_ids.len() + eval_ids.len(), corpus.samples.len());
        for (lang, n) in corpus.count_by_language() {
            let k = train.samples_of(&lang).count() as f64;
            prop_assert!((k - fraction * n as f64).abs() <= 1.0);
        }
        prop_assert_eq!(split_corpus(&corpus, fraction, seed).unwrap(), (train, eval));
    }

    #[test]
    fn text_format_round_trips(per_language in 1usize..10, len in 2usize..12, seed in any::<u64>()) {
        let corpus = gen_corpus(&bilingual_specs(40), 40, per_language, len, seed).unwrap();
        prop_assert_eq!(parse_corpus(&render_corpus(&corpus)).unwrap(), corpus);
    }
}

#[test]
fn languages_are_separable_by_vocabulary() {
    let specs = bilingual_specs(128);
    let corpus = gen_corpus(&specs, 128, 50, 32, 3).unwrap();
    for spec in &specs {
        let allowed: HashSet<u32> = spec.support().into_iter().collect();
        for s in corpus.samples_of(&spec.id) {
            assert!(s.tokens.iter().all(|t| allowed.contains(t)));
        }
    }
    // the only shared tokens are the anchors
    let a: HashSet<u32> = specs[0].support().into_iter().collect();
    let b: HashSet<u32> = specs[1].support().into_iter().collect();
    assert_eq!(a.intersection(&b).copied().collect::<HashSet<_>>(), HashSet::from([0, 1]));
}

#[test]
fn chains_concentrate_transitions() {
    // most of each state's mass goes to a handful of successors
    let spec = LanguageSpec::new("X", 0..32, 5);
    let corpus = gen_corpus(&[spec], 32, 200, 64, 9).unwrap();
    let mut counts = vec![[0usize; 32]; 32];
    for s in &corpus.samples {
        for w in s.tokens.windows(2) {
            counts[w[0] as usize][w[1] as usize] += 1;
        }
    }
    for row in counts.iter().filter(|r| r.iter().sum::<usize>() > 100) {
        let mut sorted = row.to_vec();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let top: usize = sorted[..4].iter().sum();
        assert!(top as f64 > 0.8 * row.iter().sum::<usize>() as f64);
    }
}

#[test]
fn file_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(&bilingual_specs(64), 64, 5, 8, 1).unwrap();
    let path = dir.path().join("c.txt");
    save_corpus(&corpus, &path).unwrap();
    let back = load_corpus(&path).unwrap();
    assert_eq!(back, corpus);
    let again = dir.path().join("d.txt");
    save_corpus(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}
