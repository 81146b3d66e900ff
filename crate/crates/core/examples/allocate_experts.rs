//! Turn per-layer neuron counts into an expert allocation and compare it
//! with the published allocation for a 28-layer model.
//!
//! ```bash
//! cargo run --release --example allocate_experts
//! ```

use neuronmoe::alloc::reference::{LLAMA_EN_EL_NEURONMOE, LLAMA_EN_EL_UNIQUE_NEURONS};
use neuronmoe::alloc::{allocate, normalize_scores, plan_differences, LayerScores, Rounding};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scores = LayerScores(LLAMA_EN_EL_UNIQUE_NEURONS.to_vec());
    let norm = normalize_scores(&scores);
    let floor = allocate(&scores, 1, 6, Rounding::Floor)?;
    let nearest = allocate(&scores, 1, 6, Rounding::Nearest)?;

    println!("layer  neurons  norm    floor  nearest  published");
    for l in 0..scores.len() {
        println!(
            "{l:>5}  {:>7}  {:.3}  {:>5}  {:>7}  {:>9}",
            scores.0[l], norm[l], floor.experts_per_layer[l], nearest.experts_per_layer[l], LLAMA_EN_EL_NEURONMOE[l]
        );
    }
    println!("total experts: floor {}, nearest {}", floor.total, nearest.total);
    for (l, ours, published) in plan_differences(&floor.experts_per_layer, &LLAMA_EN_EL_NEURONMOE) {
        println!("layer {l}: computed {ours}, published {published}");
    }
    Ok(())
}
