//! Compare analytic gradients with central finite differences on a small
//! mixture-of-experts model, every parameter included.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use neuronmoe::alloc::AllocationPlan;
use neuronmoe::model::{DenseModel, LanguageModel, ModelConfig, MoeModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        max_seq_len: 8,
    };
    let dense = DenseModel::init(&cfg, 1)?;
    let mut model = MoeModel::upcycle(&dense, &AllocationPlan::from_counts(&[1, 3], 1, 3)?)?.with_aux_coefficient(0.05);
    model.set_all_trainable(true);
    // break the symmetry between the copied experts and the zero router
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (_, t) in model.named_tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let batch: Vec<Vec<u32>> = (0..3).map(|_| (0..7).map(|_| rng.gen_range(0..11)).collect()).collect();
    let loss = |m: &MoeModel| batch.iter().map(|s| m.forward(s, false).unwrap().loss).sum::<f64>() / batch.len() as f64;

    let (_, grads) = model.loss_and_grads(&batch)?;
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    for name in names {
        let analytic = grads.get(&name).expect("trainable").data().to_vec();
        let mut worst: f64 = 0.0;
        for (i, a) in analytic.iter().enumerate() {
            let nudge = |m: &mut MoeModel, delta: f64| {
                for (n, t) in m.named_tensors_mut() {
                    if n == name {
                        t.data_mut()[i] += delta;
                    }
                }
            };
            nudge(&mut model, H);
            let plus = loss(&model);
            nudge(&mut model, -2.0 * H);
            let minus = loss(&model);
            nudge(&mut model, H);
            let numeric = (plus - minus) / (2.0 * H);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        println!("{name:<28} {:>4} entries, worst relative error {worst:.2e}", analytic.len());
    }
    Ok(())
}
