//! Average precision of every neuron inside every expert, computed on a
//! small hand-made routing so the numbers can be checked by eye, then on
//! an upcycled model with random routers.
//!
//! ```bash
//! cargo run --release --example expert_specialization
//! ```

use neuronmoe::alloc::AllocationPlan;
use neuronmoe::analysis::{
    collect_expert_activations, expert_ap, high_ap_counts, ExpertActivations, UnitActivations, UnitSample,
};
use neuronmoe::corpus::{bilingual_specs, gen_corpus};
use neuronmoe::model::{DenseModel, ModelConfig, MoeModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let langs = ["B", "A", "B", "A"];
    let means = [[0.9, 0.1], [0.2, 0.8], [0.7, 0.3], [0.1, 0.9]];
    let unit = UnitActivations {
        layer: 0,
        unit: 1,
        width: 2,
        samples: (0..4)
            .map(|i| UnitSample {
                sample: i,
                language: langs[i].into(),
                token_count: 1,
                mean: means[i].to_vec(),
            })
            .collect(),
    };
    let hand = ExpertActivations {
        languages: vec!["B".into(), "A".into()],
        units: vec![unit],
    };
    let report = expert_ap(&hand)?;
    println!("hand-made expert, AP per language: {:?}", report.units[0].scores);

    let cfg = ModelConfig::toy();
    let dense = DenseModel::init(&cfg, 4)?;
    let mut moe = MoeModel::upcycle(&dense, &AllocationPlan::from_counts(&[3, 1, 1, 2], 1, 3)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for layer in &mut moe.layers {
        for v in layer.router.data_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
    }
    let corpus = gen_corpus(&bilingual_specs(cfg.vocab_size), cfg.vocab_size, 60, 32, 4)?;
    let counts = high_ap_counts(&expert_ap(&collect_expert_activations(&moe, &corpus)?)?, 0.9);
    print!("{}", counts.render_all());
    Ok(())
}
