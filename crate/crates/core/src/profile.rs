//! Average-precision language specificity of individual neurons.
//!
//! For a neuron and a language, samples are ranked by activation (highest
//! first, ties by ascending sample index) and AP is the mean, over the
//! positions holding that language's samples, of the fraction of that
//! language among the top `k` ranked samples.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{ActivationTrace, Component};

/// Top-`k` size used for full-scale models.
pub const FULL_SCALE_TOP_K: usize = 1000;
/// Top-`k` size used for the desk-scale models.
pub const TOY_TOP_K: usize = 50;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub component: Component,
    pub index: usize,
}

impl NeuronId {
    pub fn new(layer: usize, component: Component, index: usize) -> Self {
        Self {
            layer,
            component,
            index,
        }
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}/{}/{}", self.layer, self.component, self.index)
    }
}

/// Ranking of sample indices: activation descending, then index ascending.
pub fn descending_order(activations: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..activations.len()).collect();
    order.sort_by(|&a, &b| activations[b].total_cmp(&activations[a]).then(a.cmp(&b)));
    order
}

/// Average precision of `activations` for the positive class in `labels`.
///
/// Errors when the lengths differ or when there is no positive or no
/// negative sample (AP is undefined there).
pub fn compute_ap(activations: &[f64], labels: &[bool]) -> Result<f64> {
    if activations.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} activations but {} labels",
            activations.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Validation(
            "average precision needs at least one positive and one negative sample".into(),
        ));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in descending_order(activations).iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// AP for every (neuron, language) pair, neuron-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ApTable {
    pub neurons: Vec<NeuronId>,
    pub languages: Vec<String>,
    pub scores: Vec<f64>,
}

impl ApTable {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, neuron: usize, language: usize) -> f64 {
        self.scores[neuron * self.languages.len() + language]
    }

    pub fn language_index(&self, language: &str) -> Option<usize> {
        self.languages.iter().position(|l| l == language)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,component,neuron,language,ap\n");
        for (n, id) in self.neurons.iter().enumerate() {
            for (l, lang) in self.languages.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    id.layer,
                    id.component,
                    id.index,
                    lang,
                    self.get(n, l)
                );
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// One-vs-rest AP of every trace column for every language in the trace.
pub fn compute_ap_table(trace: &ActivationTrace) -> Result<ApTable> {
    let languages = trace.languages();
    if languages.len() < 2 {
        return Err(Error::Validation(format!(
            "AP needs at least two languages, trace has {}",
            languages.len()
        )));
    }
    let labels: Vec<Vec<bool>> = languages
        .iter()
        .map(|lang| trace.labels().iter().map(|l| l == lang).collect())
        .collect();
    let n_cols = trace.n_cols();
    let per_column: Vec<Result<Vec<f64>>> = (0..n_cols)
        .into_par_iter()
        .map(|col| {
            let activations = trace.column(col);
            labels.iter().map(|y| compute_ap(&activations, y)).collect()
        })
        .collect();
    let mut scores = Vec::with_capacity(n_cols * languages.len());
    for col in per_column {
        scores.extend(col?);
    }
    Ok(ApTable {
        neurons: (0..n_cols)
            .map(|c| trace.neuron_at(c).expect("column in range"))
            .collect(),
        languages,
        scores,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronScore {
    #[serde(flatten)]
    pub neuron: NeuronId,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageNeuronSet {
    pub language: String,
    pub k: usize,
    pub threshold: f64,
    /// Sorted by AP descending, ties by neuron id ascending.
    pub neurons: Vec<NeuronScore>,
}

impl LanguageNeuronSet {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(path, json)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let set: Self = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        if set.neurons.len() > set.k {
            return Err(Error::Validation(format!(
                "set for `{}` holds {} neurons, more than k = {}",
                set.language,
                set.neurons.len(),
                set.k
            )));
        }
        if let Some(n) = set.neurons.iter().find(|n| n.ap <= set.threshold) {
            return Err(Error::Validation(format!(
                "neuron {} has AP {} not above threshold {}",
                n.neuron, n.ap, set.threshold
            )));
        }
        Ok(set)
    }
}

/// Per language: rank all neurons of all layers by AP, keep the top `k`,
/// then drop those with AP not strictly above `threshold`.
pub fn select_language_specific(table: &ApTable, k: usize, threshold: f64) -> Result<Vec<LanguageNeuronSet>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} is outside [0, 1)")));
    }
    Ok(table
        .languages
        .iter()
        .enumerate()
        .map(|(l, lang)| {
            let mut ranked: Vec<NeuronScore> = table
                .neurons
                .iter()
                .enumerate()
                .map(|(n, &neuron)| NeuronScore {
                    neuron,
                    ap: table.get(n, l),
                })
                .collect();
            ranked.sort_by(|a, b| b.ap.total_cmp(&a.ap).then(a.neuron.cmp(&b.neuron)));
            ranked.truncate(k);
            ranked.retain(|s| s.ap > threshold);
            LanguageNeuronSet {
                language: lang.clone(),
                k,
                threshold,
                neurons: ranked,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positives_first_is_perfect() {
        let ap = compute_ap(&[3.0, 2.0, 1.0, 0.0], &[true, true, false, false]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn hand_case() {
        // ranking: 0 (pos), 1 (neg), 3 (neg), 2 (pos) -> (1/1 + 2/4) / 2
        let ap = compute_ap(&[0.9, 0.8, 0.1, 0.7], &[true, false, true, false]).unwrap();
        assert_eq!(ap, 0.75);
    }

    #[test]
    fn monotone_transform_keeps_ap() {
        let a = [0.3, -1.0, 2.0, 2.0, 0.5, 0.1];
        let y = [true, false, true, false, false, true];
        let f: Vec<f64> = a.iter().map(|v: &f64| v.exp() * 3.0 + 1.0).collect();
        assert_eq!(compute_ap(&a, &y).unwrap(), compute_ap(&f, &y).unwrap());
    }

    #[test]
    fn undefined_cases_error() {
        assert!(compute_ap(&[1.0, 2.0], &[true, true]).is_err());
        assert!(compute_ap(&[1.0, 2.0], &[false, false]).is_err());
        assert!(compute_ap(&[1.0], &[true, false]).is_err());
    }

    #[test]
    fn all_tied_uses_index_order() {
        // order is 0,1,2,3 -> positives at ranks 2 and 4: (1/2 + 2/4) / 2
        let ap = compute_ap(&[1.0; 4], &[false, true, false, true]).unwrap();
        assert_eq!(ap, 0.5);
    }

    fn table(aps: &[f64]) -> ApTable {
        ApTable {
            neurons: (0..aps.len())
                .map(|i| NeuronId::new(i % 2, Component::MlpHidden, i))
                .collect(),
            languages: vec!["A".into()],
            scores: aps.to_vec(),
        }
    }

    #[test]
    fn nothing_above_threshold() {
        let sets = select_language_specific(&table(&[0.5, 0.2, 0.4]), 10, 0.5).unwrap();
        assert!(sets[0].neurons.is_empty());
    }

    #[test]
    fn keeps_exactly_top_k() {
        let sets = select_language_specific(&table(&[0.7, 0.9, 0.6, 0.8]), 3, 0.5).unwrap();
        let aps: Vec<f64> = sets[0].neurons.iter().map(|n| n.ap).collect();
        assert_eq!(aps, vec![0.9, 0.8, 0.7]);
    }

    #[test]
    fn truncation_happens_before_filtering() {
        let sets = select_language_specific(&table(&[0.9, 0.4, 0.3]), 2, 0.5).unwrap();
        assert_eq!(sets[0].neurons.len(), 1);
    }

    #[test]
    fn ties_resolve_by_neuron_id() {
        let sets = select_language_specific(&table(&[0.8, 0.8, 0.8]), 2, 0.5).unwrap();
        let idx: Vec<usize> = sets[0].neurons.iter().map(|n| n.neuron.index).collect();
        // neuron 0 and 2 are layer 0, neuron 1 is layer 1
        assert_eq!(idx, vec![0, 2]);
    }

    #[test]
    fn set_json_shape() {
        let sets = select_language_specific(&table(&[0.9]), 5, 0.5).unwrap();
        let json = serde_json::to_value(&sets[0]).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "language": "A", "k": 5, "threshold": 0.5,
                "neurons": [{"layer": 0, "component": "mlp-hidden", "index": 0, "ap": 0.9}]
            })
        );
    }

    #[test]
    fn rejects_bad_selection_params() {
        assert!(select_language_specific(&table(&[0.9]), 0, 0.5).is_err());
        assert!(select_language_specific(&table(&[0.9]), 1, 1.0).is_err());
    }
}
