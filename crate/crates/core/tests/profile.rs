//! AP against a quadratic brute-force oracle, plus selection properties.

use neuronmoe::corpus::{bilingual_specs, gen_corpus};
use neuronmoe::model::{DenseModel, ModelConfig};
use neuronmoe::profile::{compute_ap, compute_ap_table, select_language_specific, NeuronId};
use neuronmoe::trace::{record_trace, Component};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Precision at each positive, where the rank of sample `i` is one plus the
/// number of samples ordered before it (higher activation, or equal
/// activation and lower index).
fn brute_force_ap(a: &[f64], y: &[bool]) -> f64 {
    let rank = |i: usize| 1 + (0..a.len()).filter(|&j| a[j] > a[i] || (a[j] == a[i] && j < i)).count();
    let positives: Vec<usize> = (0..a.len()).filter(|&i| y[i]).collect();
    let sum: f64 = positives
        .iter()
        .map(|&i| {
            let r = rank(i);
            let hits = positives.iter().filter(|&&j| rank(j) <= r).count();
            hits as f64 / r as f64
        })
        .sum();
    sum / positives.len() as f64
}

/// Random instance with `n <= 64`, at least one positive and one negative,
/// and values drawn from a small grid so ties are common.
fn instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.gen_range(2..=64);
    let grid = rng.gen_range(2..=8);
    let a: Vec<f64> = (0..n)
        .map(|_| {
            if rng.gen_bool(0.5) {
                rng.gen_range(0..grid) as f64 / grid as f64
            } else {
                rng.gen_range(-1.0..1.0)
            }
        })
        .collect();
    let mut y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    y[rng.gen_range(0..n)] = true;
    let mut neg = rng.gen_range(0..n);
    while y.iter().filter(|&&v| !v).count() == 0 {
        y[neg] = false;
        neg = rng.gen_range(0..n);
    }
    (a, y)
}

#[test]
fn matches_brute_force_on_random_instances_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (a, y) = instance(&mut rng);
        worst = worst.max((compute_ap(&a, &y).unwrap() - brute_force_ap(&a, &y)).abs());
    }
    assert!(worst <= 1e-12, "max deviation {worst:e}");
}

#[test]
fn hand_case() {
    assert_eq!(compute_ap(&[0.9, 0.8, 0.1, 0.7], &[true, false, true, false]).unwrap(), 0.75);
}

#[test]
fn constant_neuron_gets_index_order_value() {
    // every value tied: the ranking is the sample order itself
    let y = [false, true, true, false, true];
    let ap = compute_ap(&[0.3; 5], &y).unwrap();
    let expected = (1.0 / 2.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0;
    assert!((ap - expected).abs() < 1e-15);
}

proptest! {
    #[test]
    fn ap_is_a_probability(values in prop::collection::vec(-5.0f64..5.0, 2..40), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y: Vec<bool> = values.iter().map(|_| rng.gen_bool(0.5)).collect();
        y[0] = true;
        y[1] = false;
        let ap = compute_ap(&values, &y).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0);
    }

    #[test]
    fn permuting_distinct_samples_keeps_ap(values in prop::collection::hash_set(-1000i32..1000, 3..30), seed in any::<u64>()) {
        let a: Vec<f64> = values.into_iter().map(f64::from).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y: Vec<bool> = a.iter().map(|_| rng.gen_bool(0.5)).collect();
        y[0] = true;
        y[1] = false;
        let mut idx: Vec<usize> = (0..a.len()).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        let pa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
        let py: Vec<bool> = idx.iter().map(|&i| y[i]).collect();
        prop_assert_eq!(compute_ap(&a, &y).unwrap(), compute_ap(&pa, &py).unwrap());
    }

    #[test]
    fn perfect_separation_holds_in_both_directions(values in prop::collection::hash_set(-1000i32..1000, 3..30)) {
        // with distinct values, perfect separation is symmetric
        let mut a: Vec<f64> = values.into_iter().map(f64::from).collect();
        a.sort_by(|x, y| y.total_cmp(x));
        let half = a.len() / 2;
        let y: Vec<bool> = (0..a.len()).map(|i| i < half.max(1)).collect();
        let not_y: Vec<bool> = y.iter().map(|v| !v).collect();
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        prop_assert_eq!(compute_ap(&a, &y).unwrap(), 1.0);
        prop_assert_eq!(compute_ap(&neg, &not_y).unwrap(), 1.0);
    }
}

#[test]
fn table_over_a_real_trace_agrees_with_oracle() {
    let cfg = ModelConfig {
        vocab_size: 32,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        max_seq_len: 16,
    };
    let model = DenseModel::init(&cfg, 3).unwrap();
    let corpus = gen_corpus(&bilingual_specs(32), 32, 12, 10, 5).unwrap();
    let trace = record_trace(&model, &corpus).unwrap();
    let table = compute_ap_table(&trace).unwrap();
    assert_eq!(table.neurons.len(), 2 * (8 + 12));
    let labels = trace.labels();
    for (n, lang) in [(0usize, 0usize), (9, 1), (27, 0)] {
        let col = trace.column(n);
        let y: Vec<bool> = labels.iter().map(|l| *l == table.languages[lang]).collect();
        assert!((table.get(n, lang) - brute_force_ap(&col, &y)).abs() < 1e-12);
    }

    let sets = select_language_specific(&table, 5, 0.5).unwrap();
    for set in &sets {
        assert!(set.neurons.len() <= 5);
        assert!(set.neurons.iter().all(|s| s.ap > 0.5));
        assert!(set.neurons.windows(2).all(|w| w[0].ap >= w[1].ap));
    }
    assert_eq!(table.neurons[0], NeuronId::new(0, Component::AttentionOutput, 0));
}
