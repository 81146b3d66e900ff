//! Train the added experts on the target language, then train only the
//! routers on target data mixed with a little source-language replay.
//!
//! ```bash
//! cargo run --release --example two_stage_training
//! ```

use neuronmoe::alloc::AllocationPlan;
use neuronmoe::corpus::{bilingual_specs, gen_corpus, split_corpus};
use neuronmoe::model::{DenseModel, ModelConfig, MoeModel, Stage};
use neuronmoe::train::{
    build_replay_mix, eval_perplexity, stage_token_budget, train_dense, train_stage1, train_stage2, TrainConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig::toy();
    let corpus = gen_corpus(&bilingual_specs(cfg.vocab_size), cfg.vocab_size, 800, 32, 5)?;
    let (train, eval) = split_corpus(&corpus, 0.9, 5)?;
    let source = train.filter_languages(&["A"]);
    let target = train.filter_languages(&["B"]);

    let mut dense = DenseModel::init(&cfg, 5)?;
    train_dense(&mut dense, &source, &TrainConfig { total_steps: 400, ..TrainConfig::toy() })?;
    println!("dense:   {:?}", eval_perplexity(&dense, &eval, None)?);

    let mut moe = MoeModel::upcycle(&dense, &AllocationPlan::from_counts(&[4, 1, 2, 3], 1, 4)?)?;
    let stage1 = TrainConfig {
        total_steps: 300,
        target_language: Some("B".into()),
        ..TrainConfig::toy()
    };
    moe.set_stage(Stage::ExpertInit);
    let report = train_stage1(&mut moe, &target, &stage1)?;
    println!("stage 1: {:?}, {} tensors changed", eval_perplexity(&moe, &eval, None)?, report.changed_tensors().len());

    let mix = build_replay_mix(&source, &target, stage_token_budget(&stage1, 32), 0.01, 5)?;
    println!("replay mix: {:?}", mix.count_by_language());
    let stage2 = TrainConfig {
        total_steps: 300,
        source_language: Some("A".into()),
        ..stage1
    };
    moe.set_stage(Stage::RouterTraining);
    let report = train_stage2(&mut moe, &mix, &stage2)?;
    println!("stage 2: {:?}, changed {:?}", eval_perplexity(&moe, &eval, None)?, report.changed_tensors());
    println!("final aux loss {:.5}", report.aux_loss.last().copied().unwrap_or_default());
    Ok(())
}
