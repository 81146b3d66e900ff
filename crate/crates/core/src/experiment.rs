//! The synthetic bilingual experiment end to end: generate two languages,
//! pretrain a dense model mostly on the source language, profile it,
//! allocate experts, upcycle, run both training stages and analyze the
//! experts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::alloc::{allocate, layer_scores, AllocationPlan, LayerScores, Rounding};
use crate::analysis::{collect_expert_activations, expert_ap, high_ap_counts, HighApCounts, HIGH_AP_THRESHOLD};
use crate::corpus::{bilingual_specs, gen_corpus, split_corpus, LabeledCorpus};
use crate::error::{Error, Result};
use crate::model::{DenseModel, ModelConfig, MoeModel, Stage};
use crate::profile::{compute_ap_table, select_language_specific, LanguageNeuronSet, DEFAULT_THRESHOLD, TOY_TOP_K};
use crate::trace::record_trace;
use crate::train::{
    build_replay_mix, eval_perplexity, stage_token_budget, train_dense, train_stage1, train_stage2, TrainConfig,
    TrainReport, DEFAULT_REPLAY_FRACTION,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BilingualConfig {
    pub model: ModelConfig,
    pub samples_per_language: usize,
    pub sample_len: usize,
    pub train_fraction: f64,
    /// Share of the target-language training samples mixed into dense
    /// pretraining, making the target a low-resource language rather than
    /// an unseen one.
    pub pretrain_target_share: f64,
    pub dense: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub top_k: usize,
    pub ap_threshold: f64,
    pub e_min: usize,
    pub e_max: usize,
    pub rounding: Rounding,
    pub replay_fraction: f64,
    pub high_ap_threshold: f64,
    pub seed: u64,
}

pub const SOURCE: &str = "A";
pub const TARGET: &str = "B";

impl Default for BilingualConfig {
    fn default() -> Self {
        let stage2 = TrainConfig {
            total_steps: 1_500,
            source_language: Some(SOURCE.into()),
            target_language: Some(TARGET.into()),
            ..TrainConfig::toy()
        };
        Self {
            model: ModelConfig::toy(),
            samples_per_language: 2500,
            sample_len: 32,
            train_fraction: 0.9,
            pretrain_target_share: 0.1,
            dense: TrainConfig::toy(),
            stage1: TrainConfig {
                total_steps: 1_000,
                target_language: Some(TARGET.into()),
                ..TrainConfig::toy()
            },
            stage2,
            top_k: TOY_TOP_K,
            ap_threshold: DEFAULT_THRESHOLD,
            e_min: 1,
            e_max: 6,
            rounding: Rounding::Floor,
            replay_fraction: DEFAULT_REPLAY_FRACTION,
            high_ap_threshold: HIGH_AP_THRESHOLD,
            seed: 7,
        }
    }
}

impl BilingualConfig {
    /// Shrinks every step count by `factor`, for smoke runs.
    pub fn scaled_steps(mut self, factor: f64) -> Self {
        for c in [&mut self.dense, &mut self.stage1, &mut self.stage2] {
            c.total_steps = ((c.total_steps as f64 * factor).round() as usize).max(1);
        }
        self
    }
}

#[derive(Clone, Debug)]
pub struct BilingualOutcome {
    pub train: LabeledCorpus,
    pub eval: LabeledCorpus,
    pub dense: DenseModel,
    pub sets: Vec<LanguageNeuronSet>,
    pub scores: LayerScores,
    pub plan: AllocationPlan,
    pub stage1: MoeModel,
    pub stage2: MoeModel,
    pub reports: Vec<TrainReport>,
    pub dense_ppl: BTreeMap<String, f64>,
    pub stage1_ppl: BTreeMap<String, f64>,
    pub stage2_ppl: BTreeMap<String, f64>,
    pub high_ap: HighApCounts,
}

/// Runs the whole experiment. `progress` receives one line per finished
/// phase.
pub fn run_bilingual(cfg: &BilingualConfig, mut progress: impl FnMut(&str)) -> Result<BilingualOutcome> {
    if !(0.0..=1.0).contains(&cfg.pretrain_target_share) {
        return Err(Error::Config("pretrain_target_share must be in [0, 1]".into()));
    }
    let vocab = cfg.model.vocab_size;
    let corpus = gen_corpus(
        &bilingual_specs(vocab),
        vocab,
        cfg.samples_per_language,
        cfg.sample_len,
        cfg.seed,
    )?;
    let (train, eval) = split_corpus(&corpus, cfg.train_fraction, cfg.seed)?;
    let train_source = train.filter_languages(&[SOURCE]);
    let train_target = train.filter_languages(&[TARGET]);

    let mut pretrain = train_source.clone();
    let n_target = (cfg.pretrain_target_share * train_target.samples.len() as f64).round() as usize;
    pretrain.samples.extend(train_target.samples.iter().take(n_target).cloned());

    let mut dense = DenseModel::init(&cfg.model, cfg.seed)?;
    let dense_report = train_dense(&mut dense, &pretrain, &cfg.dense)?;
    let dense_ppl = eval_perplexity(&dense, &eval, None)?;
    progress(&format!("dense pretraining done, eval perplexity {dense_ppl:?}"));

    let trace = record_trace(&dense, &eval)?;
    let sets = select_language_specific(&compute_ap_table(&trace)?, cfg.top_k, cfg.ap_threshold)?;
    let scores = layer_scores(&sets, cfg.model.n_layers)?;
    let plan = allocate(&scores, cfg.e_min, cfg.e_max, cfg.rounding)?;
    progress(&format!(
        "layer scores {:?}, experts per layer {:?}",
        scores.0, plan.experts_per_layer
    ));

    let mut moe = MoeModel::upcycle(&dense, &plan)?;
    moe.set_stage(Stage::ExpertInit);
    let stage1_report = train_stage1(&mut moe, &train_target, &cfg.stage1)?;
    let stage1 = moe.clone();
    let stage1_ppl = eval_perplexity(&moe, &eval, None)?;
    progress(&format!("stage 1 done, eval perplexity {stage1_ppl:?}"));

    let mix = build_replay_mix(
        &train_source,
        &train_target,
        stage_token_budget(&cfg.stage1, cfg.sample_len),
        cfg.replay_fraction,
        cfg.seed,
    )?;
    moe.set_stage(Stage::RouterTraining);
    let stage2_report = train_stage2(&mut moe, &mix, &cfg.stage2)?;
    let stage2_ppl = eval_perplexity(&moe, &eval, None)?;
    progress(&format!("stage 2 done, eval perplexity {stage2_ppl:?}"));

    let report = expert_ap(&collect_expert_activations(&moe, &eval)?)?;
    let high_ap = high_ap_counts(&report, cfg.high_ap_threshold);

    Ok(BilingualOutcome {
        train,
        eval,
        dense,
        sets,
        scores,
        plan,
        stage1,
        stage2: moe,
        reports: vec![dense_report, stage1_report, stage2_report],
        dense_ppl,
        stage1_ppl,
        stage2_ppl,
        high_ap,
    })
}
