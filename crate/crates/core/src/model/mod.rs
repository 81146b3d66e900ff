//! Small decoder-only transformer with exact gradients, and its sparse
//! mixture-of-experts upcycling.

mod checkpoint;
mod engine;
mod moe;
mod params;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trace::ProbePoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, AnyModel, CHECKPOINT_VERSION};
pub use moe::{aux_load_balance, MoeLayer, MoeModel, Stage, TOP_K};
pub use params::{Attention, Block, DenseModel, LayerNorm, Mlp};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Desk-scale default: 4 layers, width 32, MLP width 64, 128 tokens.
    pub fn toy() -> Self {
        Self {
            vocab_size: 128,
            d_model: 32,
            n_layers: 4,
            n_heads: 4,
            d_ff: 64,
            max_seq_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Probe points in trace column order: per layer, attention output then
    /// MLP hidden activation.
    pub fn probe_points(&self) -> Vec<ProbePoint> {
        use crate::trace::Component;
        (0..self.n_layers)
            .flat_map(|layer| {
                [
                    ProbePoint {
                        layer,
                        component: Component::AttentionOutput,
                        width: self.d_model,
                    },
                    ProbePoint {
                        layer,
                        component: Component::MlpHidden,
                        width: self.d_ff,
                    },
                ]
            })
            .collect()
    }
}

/// Router decision for one token in one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenRoute {
    /// Selected routable units, highest router logit first.
    pub units: Vec<usize>,
    /// Renormalized weights of `units`.
    pub weights: Vec<f64>,
    /// Full softmax over all routable units.
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRouting {
    pub n_units: usize,
    pub tokens: Vec<TokenRoute>,
}

/// Per-layer, per-token routing. Empty for dense models.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingRecord {
    pub layers: Vec<LayerRouting>,
}

/// Activations captured at one probe point, `tokens × width` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeCapture {
    pub point: ProbePoint,
    pub values: Vec<f64>,
}

/// Hidden activation of every unit that processed a token, per layer.
/// `unit_hidden[layer][token]` lists `(unit, activation)` pairs.
pub type UnitHidden = Vec<Vec<Vec<(usize, Vec<f64>)>>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Probes {
    pub captures: Vec<ProbeCapture>,
    pub unit_hidden: UnitHidden,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    pub seq_len: usize,
    /// `seq_len × vocab_size` row-major.
    pub logits: Vec<f64>,
    /// Cross-entropy plus auxiliary load-balance term.
    pub loss: f64,
    pub ce_loss: f64,
    pub aux_loss: f64,
    pub routing: RoutingRecord,
    pub probes: Option<Probes>,
}

impl ForwardResult {
    pub fn logits_at(&self, t: usize) -> &[f64] {
        let v = self.logits.len() / self.seq_len;
        &self.logits[t * v..(t + 1) * v]
    }
}

/// Named gradient tensors for the trainable parameters of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(pub BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.0.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(Tensor::is_finite)
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.0.values_mut() {
            t.scale(factor);
        }
    }
}

/// Loss decomposition for a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub aux: f64,
}

/// Common interface of the dense and the mixture-of-experts model.
pub trait LanguageModel: Sync {
    fn config(&self) -> &ModelConfig;

    fn forward(&self, tokens: &[TokenId], probes: bool) -> Result<ForwardResult>;

    /// Mean loss over the batch and its gradient for every trainable tensor.
    fn loss_parts_and_grads(&self, batch: &[Vec<TokenId>]) -> Result<(LossParts, Gradients)>;

    fn loss_and_grads(&self, batch: &[Vec<TokenId>]) -> Result<(f64, Gradients)> {
        self.loss_parts_and_grads(batch).map(|(p, g)| (p.total, g))
    }

    /// All parameter tensors with stable names, in a fixed order.
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn is_trainable(&self, name: &str) -> bool;

    /// SHA-256 digest of every tensor.
    fn digests(&self) -> BTreeMap<String, String> {
        self.named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.digest()))
            .collect()
    }

    /// Short identifier derived from all parameter digests.
    fn model_id(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, digest) in self.digests() {
            h.update(name.as_bytes());
            h.update(digest.as_bytes());
        }
        hex::encode(h.finalize())[..16].to_string()
    }
}

pub(crate) fn check_tokens(config: &ModelConfig, tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Validation("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::Validation(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Validation(format!(
            "token {t} is outside vocab size {}",
            config.vocab_size
        )));
    }
    Ok(())
}
