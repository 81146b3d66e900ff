//! Expert activation collection and expert AP against independent oracles.

use neuronmoe::alloc::AllocationPlan;
use neuronmoe::analysis::{
    collect_expert_activations, export_heatmap, expert_ap, high_ap_counts, ExpertActivations, UnitActivations,
    UnitSample,
};
use neuronmoe::corpus::{bilingual_specs, gen_corpus};
use neuronmoe::model::{DenseModel, LanguageModel, ModelConfig, MoeModel};
use neuronmoe::profile::compute_ap_table;
use neuronmoe::trace::record_trace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> ModelConfig {
    ModelConfig {
        vocab_size: 40,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 6,
        max_seq_len: 16,
    }
}

/// Router weights randomized so that routing differs between tokens.
fn routed_moe(plan: &[usize]) -> MoeModel {
    let dense = DenseModel::init(&config(), 3).unwrap();
    let hi = *plan.iter().max().unwrap();
    let mut moe = MoeModel::upcycle(&dense, &AllocationPlan::from_counts(plan, 1, hi).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for layer in &mut moe.layers {
        for v in layer.router.data_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
    }
    moe
}

/// Brute-force AP: precision at each positive with explicit pairwise ranks.
fn brute_force_ap(a: &[f64], y: &[bool]) -> f64 {
    let rank = |i: usize| 1 + (0..a.len()).filter(|&j| a[j] > a[i] || (a[j] == a[i] && j < i)).count();
    let pos: Vec<usize> = (0..a.len()).filter(|&i| y[i]).collect();
    pos.iter()
        .map(|&i| pos.iter().filter(|&&j| rank(j) <= rank(i)).count() as f64 / rank(i) as f64)
        .sum::<f64>()
        / pos.len() as f64
}

#[test]
fn tokens_are_conserved_across_units() {
    let moe = routed_moe(&[1, 4]);
    let corpus = gen_corpus(&bilingual_specs(40), 40, 6, 7, 5).unwrap();
    let acts = collect_expert_activations(&moe, &corpus).unwrap();
    assert_eq!(acts.units.len(), 2 + 5);
    let tokens = corpus.token_count();
    for layer in 0..2 {
        let routed: usize = acts
            .units
            .iter()
            .filter(|u| u.layer == layer)
            .flat_map(|u| u.samples.iter().map(|s| s.token_count))
            .sum();
        assert_eq!(routed, tokens * 2.min(1 + [1, 4][layer]));
    }
    // two routable units under top-2: every unit sees every sample
    for u in acts.units.iter().filter(|u| u.layer == 0) {
        assert_eq!(u.samples.len(), corpus.samples.len());
    }
}

#[test]
fn means_match_recomputed_routing() {
    let moe = routed_moe(&[1, 4]);
    let corpus = gen_corpus(&bilingual_specs(40), 40, 3, 5, 9).unwrap();
    let acts = collect_expert_activations(&moe, &corpus).unwrap();
    for (si, sample) in corpus.samples.iter().enumerate() {
        let res = moe.forward(&sample.tokens, true).unwrap();
        let hidden = res.probes.unwrap().unit_hidden;
        for u in &acts.units {
            let rows: Vec<&Vec<f64>> = hidden[u.layer]
                .iter()
                .flat_map(|tok| tok.iter().filter(|(unit, _)| *unit == u.unit).map(|(_, g)| g))
                .collect();
            let entry = u.samples.iter().find(|s| s.sample == si);
            assert_eq!(entry.is_some(), !rows.is_empty());
            if let Some(e) = entry {
                assert_eq!(e.token_count, rows.len());
                for n in 0..u.width {
                    let mean = rows.iter().map(|r| r[n]).sum::<f64>() / rows.len() as f64;
                    assert!((e.mean[n] - mean).abs() < 1e-12);
                }
            }
        }
    }
}

fn sample(sample: usize, language: &str, mean: Vec<f64>) -> UnitSample {
    UnitSample {
        sample,
        language: language.into(),
        token_count: 1,
        mean,
    }
}

/// Three units, two neurons each; unit 2 misses samples 1 and 4, unit 1 is
/// all one language.
pub fn routing_fixture() -> ExpertActivations {
    let langs = ["B", "A", "B", "A", "B", "A"];
    let values = [[0.9, 0.2], [0.8, 0.2], [0.1, 0.2], [0.7, 0.5], [0.4, 0.9], [0.3, 0.1]];
    let all = |offset: f64| -> Vec<UnitSample> {
        (0..6)
            .map(|i| sample(i, langs[i], values[i].iter().map(|v| v + offset).collect()))
            .collect()
    };
    ExpertActivations {
        languages: vec!["B".into(), "A".into()],
        units: vec![
            UnitActivations {
                layer: 0,
                unit: 0,
                width: 2,
                samples: all(0.0),
            },
            UnitActivations {
                layer: 0,
                unit: 1,
                width: 2,
                samples: vec![sample(0, "B", vec![1.0, 0.0]), sample(2, "B", vec![0.5, 0.5])],
            },
            UnitActivations {
                layer: 0,
                unit: 2,
                width: 2,
                samples: all(1.0).into_iter().filter(|s| s.sample != 1 && s.sample != 4).collect(),
            },
        ],
    }
}

#[test]
fn expert_ap_matches_brute_force_on_routing_fixture() {
    let fixture = routing_fixture();
    let report = expert_ap(&fixture).unwrap();
    for (u, unit) in fixture.units.iter().enumerate() {
        assert_eq!(report.units[u].population, unit.samples.len());
        for (l, lang) in fixture.languages.iter().enumerate() {
            let y: Vec<bool> = unit.samples.iter().map(|s| &s.language == lang).collect();
            let defined = y.iter().any(|&v| v) && y.iter().any(|&v| !v);
            match &report.units[u].scores[l] {
                None => assert!(!defined),
                Some(aps) => {
                    for n in 0..unit.width {
                        let col: Vec<f64> = unit.samples.iter().map(|s| s.mean[n]).collect();
                        assert_eq!(aps[n], brute_force_ap(&col, &y));
                    }
                }
            }
        }
    }
    assert_eq!(report.units[0].scores[0].as_ref().unwrap()[0], brute_force_ap(
        &[0.9, 0.8, 0.1, 0.7, 0.4, 0.3],
        &[true, false, true, false, true, false],
    ));
    assert!(report.units[1].scores.iter().all(Option::is_none));
    assert_eq!(report.units[2].population, 4);
}

#[test]
fn relabeling_to_the_complement_swaps_languages() {
    let mut fixture = routing_fixture();
    let report = expert_ap(&fixture).unwrap();
    for u in &mut fixture.units {
        for s in &mut u.samples {
            s.language = if s.language == "A" { "B".into() } else { "A".into() };
        }
    }
    let swapped = expert_ap(&fixture).unwrap();
    for (a, b) in report.units.iter().zip(&swapped.units) {
        assert_eq!(a.scores[0], b.scores[1]);
        assert_eq!(a.scores[1], b.scores[0]);
    }
}

#[test]
fn dense_trace_fixture_reproduces_profile_ap() {
    let model = DenseModel::init(&config(), 2).unwrap();
    let corpus = gen_corpus(&bilingual_specs(40), 40, 8, 6, 4).unwrap();
    let trace = record_trace(&model, &corpus).unwrap();
    let table = compute_ap_table(&trace).unwrap();
    let unit = UnitActivations {
        layer: 0,
        unit: 0,
        width: trace.n_cols(),
        samples: (0..trace.n_rows())
            .map(|i| sample(i, trace.labels()[i], trace.row(i).iter().map(|&v| f64::from(v)).collect()))
            .collect(),
    };
    let report = expert_ap(&ExpertActivations {
        languages: table.languages.clone(),
        units: vec![unit],
    })
    .unwrap();
    for l in 0..table.languages.len() {
        let aps = report.units[0].scores[l].as_ref().unwrap();
        for n in 0..trace.n_cols() {
            assert_eq!(aps[n], table.get(n, l));
        }
    }
}

#[test]
fn heatmap_rows_and_determinism() {
    let moe = routed_moe(&[1, 2]);
    let corpus = gen_corpus(&bilingual_specs(40), 40, 6, 7, 5).unwrap();
    let counts = high_ap_counts(&expert_ap(&collect_expert_activations(&moe, &corpus).unwrap()).unwrap(), 0.9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("heat.csv");
    export_heatmap(&counts, &path).unwrap();
    let first = std::fs::read_to_string(&path).unwrap();
    assert_eq!(first.lines().count(), 1 + 2 + 3);
    assert!(first.starts_with("layer,unit,A,B\n") || first.starts_with("layer,unit,B,A\n"));
    export_heatmap(&counts, &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), first);
    assert!(std::fs::read_to_string(path.with_extension("txt")).unwrap().contains("base_layer"));
    for row in &counts.rows {
        for l in 0..2 {
            if let Some(r) = row.ratio(l) {
                assert!((0.0..=1.0).contains(&r));
            }
        }
    }
    assert!(export_heatmap(&counts, &dir.path().join("missing/heat.csv")).is_err());
}
