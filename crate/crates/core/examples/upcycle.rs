//! Upcycle a dense model into a mixture of experts and check that the
//! result computes the same function before any training.
//!
//! ```bash
//! cargo run --release --example upcycle
//! ```

use neuronmoe::alloc::AllocationPlan;
use neuronmoe::model::{DenseModel, LanguageModel, ModelConfig, MoeModel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig::toy();
    let dense = DenseModel::init(&cfg, 1)?;
    let plan = AllocationPlan::from_counts(&[6, 1, 3, 2], 1, 6)?;
    let moe = MoeModel::upcycle(&dense, &plan)?;

    println!("dense parameters: {}", dense.named_tensors().len());
    println!("MoE parameters: {}", moe.named_tensors().len());
    for l in 0..cfg.n_layers {
        println!("layer {l}: {} units (base MLP + {} experts)", moe.n_units(l), plan.experts(l));
    }

    let tokens: Vec<u32> = (0..48).map(|i| (i * 37 % cfg.vocab_size) as u32).collect();
    let a = dense.forward(&tokens, false)?;
    let b = moe.forward(&tokens, false)?;
    let max_diff = a.logits.iter().zip(&b.logits).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    println!("max logit difference after upcycling: {max_diff:.2e}");
    println!("loss dense {:.6}, MoE cross-entropy {:.6}", a.loss, b.ce_loss);
    Ok(())
}
