//! Training: AdamW, cosine schedule, gradient clipping, the two MoE
//! training stages, replay mixing and perplexity evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledCorpus, Sample, TokenId};
use crate::error::{Error, Result};
use crate::model::{DenseModel, Gradients, LanguageModel, MoeModel, Stage};

pub use crate::model::aux_load_balance;

/// Fraction of stage-1 tokens replayed from the source language in stage 2.
pub const DEFAULT_REPLAY_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub max_grad_norm: f64,
    pub aux_coefficient: f64,
    pub seed: u64,
    /// Language the model was pretrained on (replayed in stage 2).
    pub source_language: Option<String>,
    /// Language being added.
    pub target_language: Option<String>,
    /// Share of each stage-2 batch drawn from source-language replay samples.
    pub replay_batch_share: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// Full-scale hyperparameters.
    pub fn full_scale() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
            batch_size: 32,
            total_steps: 15_000,
            max_grad_norm: 1.0,
            aux_coefficient: 0.01,
            seed: 42,
            source_language: None,
            target_language: None,
            replay_batch_share: 0.5,
        }
    }

    /// Desk-scale profile: same optimizer settings, a larger learning rate,
    /// batch 16 and 2,000 steps.
    pub fn toy() -> Self {
        Self {
            learning_rate: 3e-3,
            batch_size: 16,
            total_steps: 2_000,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
            ("max_grad_norm", self.max_grad_norm),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.weight_decay < 0.0 || self.aux_coefficient < 0.0 {
            return Err(Error::Config("weight_decay and aux_coefficient must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.replay_batch_share) {
            return Err(Error::Config("replay_batch_share must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `base_lr * 0.5 * (1 + cos(pi * step / total_steps))`; zero past the end.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return if step == 0 && total_steps == 0 { base_lr } else { 0.0 };
    }
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

/// Linear warmup over `warmup_steps`, then cosine decay over the rest.
pub fn scheduled_lr(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.learning_rate * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    cosine_lr(
        step - cfg.warmup_steps,
        cfg.total_steps.saturating_sub(cfg.warmup_steps),
        cfg.learning_rate,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamWParams {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
            weight_decay: c.weight_decay,
        }
    }
}

/// One AdamW update of a flat parameter slice. `step` counts from 1.
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    hp: AdamWParams,
    lr: f64,
    step: u64,
) {
    let c1 = 1.0 - hp.beta1.powi(step as i32);
    let c2 = 1.0 - hp.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        param[i] -= lr * hp.weight_decay * param[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + hp.epsilon);
    }
}

/// First and second moments per tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// Applies AdamW to every trainable tensor that has a gradient. Checks all
/// gradients for finiteness before touching any parameter.
pub fn adamw_step<M: LanguageModel + ?Sized>(
    model: &mut M,
    grads: &Gradients,
    state: &mut AdamState,
    hp: AdamWParams,
    lr: f64,
    step_index: u64,
) -> Result<()> {
    if step_index == 0 {
        return Err(Error::Validation("step_index starts at 1".into()));
    }
    if let Some((name, _)) = grads.0.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient for `{name}`")));
    }
    let trainable: Vec<bool> = model
        .named_tensors()
        .iter()
        .map(|(n, _)| model.is_trainable(n))
        .collect();
    for ((name, tensor), trainable) in model.named_tensors_mut().into_iter().zip(trainable) {
        let Some(grad) = grads.get(&name) else { continue };
        if !trainable {
            continue;
        }
        if grad.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                name,
                expected: tensor.shape().to_vec(),
                found: grad.shape().to_vec(),
            });
        }
        let (m, v) = state
            .moments
            .entry(name)
            .or_insert_with(|| (vec![0.0; tensor.len()], vec![0.0; tensor.len()]));
        adamw_update(tensor.data_mut(), grad.data(), m, v, hp, lr, step_index);
    }
    Ok(())
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub steps: usize,
    pub loss: Vec<f64>,
    pub aux_loss: Vec<f64>,
    pub learning_rate: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub eval_perplexity: BTreeMap<String, f64>,
    pub digests_before: BTreeMap<String, String>,
    pub digests_after: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

impl TrainReport {
    /// Tensors whose digest changed during the run.
    pub fn changed_tensors(&self) -> Vec<String> {
        self.digests_after
            .iter()
            .filter(|(n, d)| self.digests_before.get(*n) != Some(d))
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(path, json)?;
        Ok(())
    }
}

fn run_training<M, F>(
    model: &mut M,
    cfg: &TrainConfig,
    stage: &str,
    mut next_batch: F,
) -> Result<TrainReport>
where
    M: LanguageModel,
    F: FnMut(&mut ChaCha8Rng) -> Vec<Vec<TokenId>>,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::default();
    let hp = AdamWParams::from(cfg);
    let mut report = TrainReport {
        stage: stage.to_string(),
        digests_before: model.digests(),
        ..TrainReport::default()
    };
    for step in 0..cfg.total_steps {
        let lr = scheduled_lr(cfg, step);
        let batch = next_batch(&mut rng);
        let (parts, mut grads) = model.loss_parts_and_grads(&batch)?;
        if !parts.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at step {step}")));
        }
        let norm = clip_grad_norm(&mut grads, cfg.max_grad_norm);
        adamw_step(model, &grads, &mut state, hp, lr, step as u64 + 1)?;
        report.loss.push(parts.total);
        report.aux_loss.push(parts.aux);
        report.learning_rate.push(lr);
        report.grad_norm.push(norm);
    }
    report.steps = cfg.total_steps;
    report.digests_after = model.digests();
    Ok(report)
}

fn sample_tokens(pool: &[&Sample], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<TokenId>> {
    (0..n)
        .map(|_| pool[rng.gen_range(0..pool.len())].tokens.clone())
        .collect()
}

/// Trains every parameter of a dense model on `corpus`.
pub fn train_dense(model: &mut DenseModel, corpus: &LabeledCorpus, cfg: &TrainConfig) -> Result<TrainReport> {
    let pool: Vec<&Sample> = corpus.samples.iter().collect();
    if pool.is_empty() {
        return Err(Error::Validation("training corpus is empty".into()));
    }
    run_training(model, cfg, "dense", |rng| sample_tokens(&pool, cfg.batch_size, rng))
}

fn require_stage(model: &MoeModel, stage: Stage) -> Result<()> {
    let mut expected = model.clone();
    expected.set_stage(stage);
    if expected.mask != model.mask {
        return Err(Error::Validation(format!(
            "model trainability mask does not match {stage}"
        )));
    }
    Ok(())
}

/// Expert initialization: base frozen, experts and routers trained on
/// target-language data with cross-entropy plus the load-balance term.
pub fn train_stage1(model: &mut MoeModel, target_corpus: &LabeledCorpus, cfg: &TrainConfig) -> Result<TrainReport> {
    require_stage(model, Stage::ExpertInit)?;
    let mut warnings = Vec::new();
    let languages = target_corpus.count_by_language();
    match &cfg.target_language {
        Some(target) => {
            if !languages.contains_key(target) {
                return Err(Error::Validation(format!(
                    "stage-1 corpus has no samples of target language `{target}`"
                )));
            }
            for other in languages.keys().filter(|l| *l != target) {
                warnings.push(format!(
                    "stage-1 corpus contains non-target language `{other}`"
                ));
            }
        }
        None if languages.len() > 1 => warnings.push(format!(
            "stage-1 corpus mixes {} languages; expected target-only data",
            languages.len()
        )),
        None => {}
    }
    let pool: Vec<&Sample> = target_corpus.samples.iter().collect();
    if pool.is_empty() {
        return Err(Error::Validation("stage-1 corpus is empty".into()));
    }
    model.aux_coefficient = cfg.aux_coefficient;
    let mut report = run_training(model, cfg, "stage1", |rng| sample_tokens(&pool, cfg.batch_size, rng))?;
    report.warnings = warnings;
    Ok(report)
}

/// Router training on a replay mix. Each batch takes
/// `round(replay_batch_share * batch_size)` source samples and fills the rest
/// with target samples, interleaved.
pub fn train_stage2(model: &mut MoeModel, replay_mix: &LabeledCorpus, cfg: &TrainConfig) -> Result<TrainReport> {
    require_stage(model, Stage::RouterTraining)?;
    let source = cfg
        .source_language
        .as_deref()
        .ok_or_else(|| Error::Config("stage 2 needs source_language".into()))?;
    let target = cfg
        .target_language
        .as_deref()
        .ok_or_else(|| Error::Config("stage 2 needs target_language".into()))?;
    let source_pool: Vec<&Sample> = replay_mix.samples_of(source).collect();
    let target_pool: Vec<&Sample> = replay_mix.samples_of(target).collect();
    if source_pool.is_empty() {
        return Err(Error::Validation(format!(
            "replay mix has no samples of source language `{source}`"
        )));
    }
    if target_pool.is_empty() {
        return Err(Error::Validation(format!(
            "replay mix has no samples of target language `{target}`"
        )));
    }
    let n_source = (cfg.replay_batch_share * cfg.batch_size as f64).round() as usize;
    let n_target = cfg.batch_size - n_source;
    model.aux_coefficient = cfg.aux_coefficient;
    run_training(model, cfg, "stage2", |rng| {
        let src = sample_tokens(&source_pool, n_source, rng);
        let tgt = sample_tokens(&target_pool, n_target, rng);
        interleave(src, tgt)
    })
}

fn interleave(a: Vec<Vec<TokenId>>, b: Vec<Vec<TokenId>>) -> Vec<Vec<TokenId>> {
    let total = a.len() + b.len();
    let mut out = Vec::with_capacity(total);
    let (mut ai, mut bi) = (a.into_iter(), b.into_iter());
    let (na, nb) = (ai.len(), bi.len());
    let (mut ta, mut tb) = (0usize, 0usize);
    while out.len() < total {
        // take from whichever side is furthest behind its proportional share
        let take_a = tb >= nb || (ta < na && ta * nb <= tb * na);
        if take_a {
            out.push(ai.next().expect("counted"));
            ta += 1;
        } else {
            out.push(bi.next().expect("counted"));
            tb += 1;
        }
    }
    out
}

/// Target data plus enough randomly chosen source samples to cover
/// `fraction` of the stage-1 token budget (at least one sample).
pub fn build_replay_mix(
    source: &LabeledCorpus,
    target: &LabeledCorpus,
    stage1_tokens: usize,
    fraction: f64,
    seed: u64,
) -> Result<LabeledCorpus> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("replay fraction {fraction} is outside (0, 1]")));
    }
    if source.samples.is_empty() {
        return Err(Error::Validation("replay source corpus is empty".into()));
    }
    let budget = (fraction * stage1_tokens as f64).ceil() as usize;
    let mut candidates: Vec<&Sample> = source.samples.iter().collect();
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut picked = LabeledCorpus {
        vocab_size: source.vocab_size,
        languages: source.languages.clone(),
        samples: Vec::new(),
    };
    let mut tokens = 0;
    for s in candidates {
        if tokens >= budget && !picked.samples.is_empty() {
            break;
        }
        tokens += s.tokens.len();
        picked.samples.push(s.clone());
    }
    target.merge(&picked)
}

/// Token count a training run consumes: steps × batch × sequence length.
pub fn stage_token_budget(cfg: &TrainConfig, seq_len: usize) -> usize {
    cfg.total_steps * cfg.batch_size * seq_len
}

/// `exp(mean next-token NLL)` per language, pooled over all predicted tokens
/// of that language's samples. The load-balance term is not included.
pub fn eval_perplexity<M: LanguageModel + ?Sized>(
    model: &M,
    corpus: &LabeledCorpus,
    language: Option<&str>,
) -> Result<BTreeMap<String, f64>> {
    let languages: Vec<String> = match language {
        Some(l) => {
            if !corpus.has_language(l) {
                return Err(Error::Validation(format!("corpus has no samples of `{l}`")));
            }
            vec![l.to_string()]
        }
        None => corpus.count_by_language().into_keys().collect(),
    };
    if languages.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty corpus".into()));
    }
    let mut out = BTreeMap::new();
    for lang in languages {
        let (mut nll, mut count) = (0.0, 0usize);
        for s in corpus.samples_of(&lang) {
            let r = model.forward(&s.tokens, false)?;
            let n = s.tokens.len() - 1;
            nll += r.ce_loss * n as f64;
            count += n;
        }
        out.insert(lang, (nll / count as f64).exp());
    }
    Ok(out)
}
