//! The whole pipeline on two synthetic languages: dense pretraining,
//! neuron profiling, allocation, upcycling, both training stages and the
//! per-expert analysis. Takes a few minutes in release mode; pass
//! `--quick` for a shortened run.
//!
//! ```bash
//! cargo run --release --example bilingual_experiment -- --quick
//! ```

use std::time::Instant;

use neuronmoe::experiment::{run_bilingual, BilingualConfig, TARGET};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = BilingualConfig::default();
    if std::env::args().any(|a| a == "--quick") {
        cfg = cfg.scaled_steps(0.2);
        cfg.samples_per_language = 800;
    }
    let start = Instant::now();
    let out = run_bilingual(&cfg, |line| println!("[{:>5.0?}] {line}", start.elapsed()))?;

    println!();
    println!("perplexity   dense    stage 1  stage 2");
    for lang in out.dense_ppl.keys() {
        println!(
            "{lang:<10} {:>7.3}  {:>7.3}  {:>7.3}",
            out.dense_ppl[lang], out.stage1_ppl[lang], out.stage2_ppl[lang]
        );
    }
    println!("experts per layer {:?} (total {})", out.plan.experts_per_layer, out.plan.total);
    println!();
    print!("{}", out.high_ap.render_table(TARGET)?);
    Ok(())
}
