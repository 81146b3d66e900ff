//! Per-layer expert allocation from language-specific neuron diversity.
//!
//! The layer score is the size of the union of language-specific neurons
//! found in that layer. Scores are min-max normalized over the layers and
//! mapped linearly onto `[e_min, e_max]`.

pub mod reference;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::{LanguageNeuronSet, NeuronId};

pub const PLAN_VERSION: u32 = 1;

/// Unique language-specific neuron count per layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerScores(pub Vec<u64>);

impl LayerScores {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    fn min_max(&self) -> Option<(u64, u64)> {
        let min = *self.0.iter().min()?;
        let max = *self.0.iter().max()?;
        Some((min, max))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    #[default]
    Floor,
    Nearest,
}

impl fmt::Display for Rounding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rounding::Floor => "floor",
            Rounding::Nearest => "nearest",
        })
    }
}

impl FromStr for Rounding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "floor" => Ok(Rounding::Floor),
            "nearest" => Ok(Rounding::Nearest),
            other => Err(Error::Config(format!("unknown rounding mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub version: u32,
    pub n_layers: usize,
    pub e_min: usize,
    pub e_max: usize,
    pub rounding: Rounding,
    /// Source scores; empty when the plan was written by hand.
    pub scores: LayerScores,
    pub experts_per_layer: Vec<usize>,
    pub total: usize,
}

impl AllocationPlan {
    /// A plan with known expert counts but no source scores.
    pub fn from_counts(experts_per_layer: &[usize], e_min: usize, e_max: usize) -> Result<Self> {
        let plan = Self {
            version: PLAN_VERSION,
            n_layers: experts_per_layer.len(),
            e_min,
            e_max,
            rounding: Rounding::Floor,
            scores: LayerScores::default(),
            experts_per_layer: experts_per_layer.to_vec(),
            total: experts_per_layer.iter().sum(),
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Same number of added experts in every layer.
    pub fn uniform(n_layers: usize, experts: usize) -> Result<Self> {
        Self::from_counts(&vec![experts; n_layers], experts, experts)
    }

    pub fn experts(&self, layer: usize) -> usize {
        self.experts_per_layer[layer]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.version != PLAN_VERSION {
            return bad(format!("unsupported plan version {}", self.version));
        }
        if self.e_min < 1 {
            return bad("e_min must be at least 1".into());
        }
        if self.e_min > self.e_max {
            return bad(format!("e_min {} exceeds e_max {}", self.e_min, self.e_max));
        }
        if self.n_layers == 0 || self.experts_per_layer.len() != self.n_layers {
            return bad(format!(
                "plan declares {} layers but lists {} expert counts",
                self.n_layers,
                self.experts_per_layer.len()
            ));
        }
        for (l, &e) in self.experts_per_layer.iter().enumerate() {
            if e < self.e_min || e > self.e_max {
                return bad(format!(
                    "layer {l} has {e} experts, outside [{}, {}]",
                    self.e_min, self.e_max
                ));
            }
        }
        let sum: usize = self.experts_per_layer.iter().sum();
        if sum != self.total {
            return bad(format!("total {} does not match sum {sum}", self.total));
        }
        if !self.scores.is_empty() {
            if self.scores.len() != self.n_layers {
                return bad(format!(
                    "plan has {} scores for {} layers",
                    self.scores.len(),
                    self.n_layers
                ));
            }
            let (min, max) = self.scores.min_max().expect("non-empty");
            if max > min {
                for (l, (&s, &e)) in self.scores.0.iter().zip(&self.experts_per_layer).enumerate() {
                    if s == max && e != self.e_max {
                        return bad(format!("layer {l} attains the max score but has {e} experts"));
                    }
                    if s == min && e != self.e_min {
                        return bad(format!("layer {l} attains the min score but has {e} experts"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Size of the per-layer union of language-specific neurons across all
/// given languages. Attention and MLP neurons of a layer are pooled.
pub fn layer_scores(sets: &[LanguageNeuronSet], n_layers: usize) -> Result<LayerScores> {
    if sets.is_empty() {
        return Err(Error::Validation("at least one language set is required".into()));
    }
    let mut per_layer: Vec<BTreeSet<NeuronId>> = vec![BTreeSet::new(); n_layers];
    for set in sets {
        for entry in &set.neurons {
            let layer = entry.neuron.layer;
            if layer >= n_layers {
                return Err(Error::Validation(format!(
                    "neuron {} of language `{}` references layer {layer} of a {n_layers}-layer model",
                    entry.neuron, set.language
                )));
            }
            per_layer[layer].insert(entry.neuron);
        }
    }
    Ok(LayerScores(per_layer.iter().map(|s| s.len() as u64).collect()))
}

/// Min-max normalization to `[0, 1]`. A constant vector maps to all zeros.
pub fn normalize_scores(scores: &LayerScores) -> Vec<f64> {
    match scores.min_max() {
        None => Vec::new(),
        Some((min, max)) if max == min => vec![0.0; scores.len()],
        Some((min, max)) => scores
            .0
            .iter()
            .map(|&s| (s - min) as f64 / (max - min) as f64)
            .collect(),
    }
}

/// `E_l = e_min + round(norm(S_l) * (e_max - e_min))`.
///
/// The product is evaluated in exact integer arithmetic so that floor
/// rounding never loses a unit to floating-point error.
pub fn allocate(
    scores: &LayerScores,
    e_min: usize,
    e_max: usize,
    rounding: Rounding,
) -> Result<AllocationPlan> {
    if e_min < 1 {
        return Err(Error::Config("e_min must be at least 1".into()));
    }
    if e_min > e_max {
        return Err(Error::Config(format!("e_min {e_min} exceeds e_max {e_max}")));
    }
    let (min, max) = scores
        .min_max()
        .ok_or_else(|| Error::Config("cannot allocate over zero layers".into()))?;
    let span = (e_max - e_min) as u128;
    let range = (max - min) as u128;
    let experts: Vec<usize> = scores
        .0
        .iter()
        .map(|&s| {
            if range == 0 {
                return e_min;
            }
            let num = (s - min) as u128 * span;
            let step = match rounding {
                Rounding::Floor => num / range,
                Rounding::Nearest => (2 * num + range) / (2 * range),
            };
            e_min + step as usize
        })
        .collect();
    let plan = AllocationPlan {
        version: PLAN_VERSION,
        n_layers: scores.len(),
        e_min,
        e_max,
        rounding,
        scores: scores.clone(),
        total: experts.iter().sum(),
        experts_per_layer: experts,
    };
    plan.validate()?;
    Ok(plan)
}

pub fn write_plan(plan: &AllocationPlan, path: &Path) -> Result<()> {
    plan.validate()?;
    let mut json = serde_json::to_string_pretty(plan)?;
    json.push('\n');
    fs::write(path, json)?;
    Ok(())
}

pub fn read_plan(path: &Path) -> Result<AllocationPlan> {
    parse_plan(&fs::read_to_string(path)?)
}

pub fn parse_plan(json: &str) -> Result<AllocationPlan> {
    let plan: AllocationPlan = serde_json::from_str(json)
        .map_err(|e| Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    plan.validate()?;
    Ok(plan)
}

/// Layers where two plans disagree, as `(layer, left, right)`.
pub fn plan_differences(left: &[usize], right: &[usize]) -> Vec<(usize, usize, usize)> {
    left.iter()
        .zip(right)
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(l, (&a, &b))| (l, a, b))
        .collect()
}
