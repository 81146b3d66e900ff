use std::collections::BTreeMap;
use std::fmt;

use super::params::Mlp;
use super::{engine, DenseModel, ForwardResult, Gradients, LanguageModel, LossParts, ModelConfig, RoutingRecord};
use crate::alloc::AllocationPlan;
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Units selected per token (capped by the number of routable units).
pub const TOP_K: usize = 2;

/// Default auxiliary load-balance coefficient.
pub const DEFAULT_AUX_COEFFICIENT: f64 = 0.01;

/// Added experts and the router of one layer. Routable unit 0 is the base
/// MLP of the layer; unit `i + 1` is `experts[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    /// `d_model × (1 + experts.len())`.
    pub router: Tensor,
    pub experts: Vec<Mlp>,
}

impl MoeLayer {
    pub fn n_units(&self) -> usize {
        1 + self.experts.len()
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            router: Tensor::zeros_like(&self.router),
            experts: self.experts.iter().map(Mlp::zeros_like).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Base frozen; experts and routers train on target-language data.
    ExpertInit,
    /// Only routers train, on a source/target replay mix.
    RouterTraining,
}

impl Stage {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(Stage::ExpertInit),
            2 => Ok(Stage::RouterTraining),
            other => Err(Error::Validation(format!("unknown training stage {other}"))),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            Stage::ExpertInit => 1,
            Stage::RouterTraining => 2,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}", self.number())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum TensorRole {
    Base,
    Expert,
    Router,
}

pub(crate) fn tensor_role(name: &str) -> TensorRole {
    if name.ends_with(".router") {
        TensorRole::Router
    } else if name.contains(".experts.") {
        TensorRole::Expert
    } else {
        TensorRole::Base
    }
}

/// Dense model with per-layer added experts and routers.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeModel {
    pub base: DenseModel,
    pub layers: Vec<MoeLayer>,
    pub plan: AllocationPlan,
    /// Trainability flag for every named tensor.
    pub mask: BTreeMap<String, bool>,
    pub aux_coefficient: f64,
}

impl MoeModel {
    /// Sparse upcycling: layer `l` gains `plan.experts(l)` bit-exact clones of
    /// its MLP and a zero router, so routing starts uniform and the model
    /// computes exactly what the dense source computes. The returned model
    /// carries the stage-1 mask.
    pub fn upcycle(dense: &DenseModel, plan: &AllocationPlan) -> Result<Self> {
        plan.validate()?;
        let n_layers = dense.config.n_layers;
        if plan.n_layers != n_layers {
            return Err(Error::Validation(format!(
                "plan has {} layers, model has {n_layers}",
                plan.n_layers
            )));
        }
        let layers = dense
            .blocks
            .iter()
            .zip(&plan.experts_per_layer)
            .map(|(block, &e)| MoeLayer {
                router: Tensor::zeros(&[dense.config.d_model, 1 + e]),
                experts: vec![block.mlp.clone(); e],
            })
            .collect();
        let mut model = Self {
            base: dense.clone(),
            layers,
            plan: plan.clone(),
            mask: BTreeMap::new(),
            aux_coefficient: DEFAULT_AUX_COEFFICIENT,
        };
        model.set_stage(Stage::ExpertInit);
        Ok(model)
    }

    pub fn with_aux_coefficient(mut self, alpha: f64) -> Self {
        self.aux_coefficient = alpha;
        self
    }

    pub fn set_stage(&mut self, stage: Stage) {
        let names: Vec<String> = self.tensors().into_iter().map(|(n, _)| n).collect();
        self.mask = names
            .into_iter()
            .map(|n| {
                let trainable = match (stage, tensor_role(&n)) {
                    (_, TensorRole::Base) => false,
                    (Stage::ExpertInit, _) => true,
                    (Stage::RouterTraining, role) => role == TensorRole::Router,
                };
                (n, trainable)
            })
            .collect();
    }

    /// Numeric stage selector; anything other than 1 or 2 is rejected.
    pub fn set_stage_mask(&mut self, stage: u32) -> Result<()> {
        self.set_stage(Stage::from_number(stage)?);
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for v in self.mask.values_mut() {
            *v = trainable;
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.mask
            .iter()
            .filter(|(_, &t)| t)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn n_units(&self, layer: usize) -> usize {
        self.layers[layer].n_units()
    }

    /// Human-readable unit label: `base_layer` or `expert_<i>`.
    pub fn unit_label(unit: usize) -> String {
        if unit == 0 {
            "base_layer".to_string()
        } else {
            format!("expert_{}", unit - 1)
        }
    }

    pub(crate) fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.base.tensors();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.router"), &layer.router));
            for (e, mlp) in layer.experts.iter().enumerate() {
                mlp.push_named(&format!("layers.{l}.experts.{e}"), &mut out);
            }
        }
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.base.tensors_mut();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{l}.router"), &mut layer.router));
            for (e, mlp) in layer.experts.iter_mut().enumerate() {
                mlp.push_named_mut(&format!("layers.{l}.experts.{e}"), &mut out);
            }
        }
        out
    }
}

impl LanguageModel for MoeModel {
    fn config(&self) -> &ModelConfig {
        &self.base.config
    }

    fn forward(&self, tokens: &[TokenId], probes: bool) -> Result<ForwardResult> {
        engine::Network::moe(self).forward(tokens, probes)
    }

    fn loss_parts_and_grads(&self, batch: &[Vec<TokenId>]) -> Result<(LossParts, Gradients)> {
        let (parts, grads) = engine::Network::moe(self).loss_and_grads(batch)?;
        let mut named = BTreeMap::new();
        for (n, t) in grads.base.tensors() {
            if self.is_trainable(&n) {
                named.insert(n, t.clone());
            }
        }
        for (l, layer) in grads.moe.iter().enumerate() {
            let router = format!("layers.{l}.router");
            if self.is_trainable(&router) {
                named.insert(router, layer.router.clone());
            }
            for (e, mlp) in layer.experts.iter().enumerate() {
                let mut v = Vec::new();
                mlp.push_named(&format!("layers.{l}.experts.{e}"), &mut v);
                for (n, t) in v {
                    if self.is_trainable(&n) {
                        named.insert(n, t.clone());
                    }
                }
            }
        }
        Ok((parts, Gradients(named)))
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.tensors()
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.tensors_mut()
    }

    fn is_trainable(&self, name: &str) -> bool {
        self.mask.get(name).copied().unwrap_or(false)
    }
}

/// Auxiliary load-balance loss.
///
/// Per layer: `alpha * N * Σ_e f_e * p_e`, where `N` is the number of
/// routable units, `f_e` the fraction of all (token, slot) selections that
/// went to unit `e`, and `p_e` the mean router probability of `e` over
/// tokens. Layer terms are averaged. Perfect balance under uniform
/// probabilities gives exactly `alpha` per layer.
pub fn aux_load_balance(routing: &RoutingRecord, alpha: f64) -> f64 {
    if routing.layers.is_empty() || alpha == 0.0 {
        return 0.0;
    }
    let total: f64 = routing
        .layers
        .iter()
        .map(|layer| {
            let (fractions, mean_probs) = layer_balance_stats(layer);
            let dot: f64 = fractions.iter().zip(&mean_probs).map(|(f, p)| f * p).sum();
            alpha * layer.n_units as f64 * dot
        })
        .sum();
    total / routing.layers.len() as f64
}

/// Selection fractions `f_e` and mean probabilities `p_e` of one layer.
pub(crate) fn layer_balance_stats(layer: &super::LayerRouting) -> (Vec<f64>, Vec<f64>) {
    let n = layer.n_units;
    let mut counts = vec![0.0; n];
    let mut probs = vec![0.0; n];
    let mut selections = 0usize;
    for tok in &layer.tokens {
        for &u in &tok.units {
            counts[u] += 1.0;
        }
        selections += tok.units.len();
        for (p, q) in probs.iter_mut().zip(&tok.probs) {
            *p += q;
        }
    }
    if selections > 0 {
        for c in &mut counts {
            *c /= selections as f64;
        }
    }
    if !layer.tokens.is_empty() {
        let t = layer.tokens.len() as f64;
        for p in &mut probs {
            *p /= t;
        }
    }
    (counts, probs)
}
