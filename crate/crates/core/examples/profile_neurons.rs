//! Record activations of a dense model briefly trained on both languages,
//! score every neuron with average precision and pick the language-specific
//! ones.
//!
//! ```bash
//! cargo run --release --example profile_neurons
//! ```

use neuronmoe::alloc::layer_scores;
use neuronmoe::corpus::{bilingual_specs, gen_corpus, split_corpus};
use neuronmoe::model::{DenseModel, ModelConfig};
use neuronmoe::profile::{compute_ap_table, select_language_specific, DEFAULT_THRESHOLD, TOY_TOP_K};
use neuronmoe::trace::record_trace;
use neuronmoe::train::{train_dense, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig::toy();
    let corpus = gen_corpus(&bilingual_specs(cfg.vocab_size), cfg.vocab_size, 400, 32, 3)?;
    let (train, eval) = split_corpus(&corpus, 0.8, 3)?;

    let mut model = DenseModel::init(&cfg, 3)?;
    train_dense(&mut model, &train, &TrainConfig { total_steps: 200, ..TrainConfig::toy() })?;

    let trace = record_trace(&model, &eval)?;
    println!("trace: {} samples x {} neurons", trace.n_rows(), trace.n_cols());
    let table = compute_ap_table(&trace)?;
    let sets = select_language_specific(&table, TOY_TOP_K, DEFAULT_THRESHOLD)?;
    for set in &sets {
        let top: Vec<String> = set.neurons.iter().take(5).map(|s| format!("{} ({:.3})", s.neuron, s.ap)).collect();
        println!("{}: {} specific neurons, top {}", set.language, set.neurons.len(), top.join(", "));
    }
    println!("unique language-specific neurons per layer: {:?}", layer_scores(&sets, cfg.n_layers)?.0);
    Ok(())
}
