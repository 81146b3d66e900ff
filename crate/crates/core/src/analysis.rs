//! Per-expert language specialization after training.
//!
//! Every routable unit (the base MLP and each added expert) gets, per
//! sample, the mean hidden activation over the tokens routed to it. Those
//! sample-level vectors are ranked per neuron exactly like the dense
//! profiling step, and neurons with AP at or above a threshold count as
//! highly language-specific.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledCorpus;
use crate::error::{Error, Result};
use crate::model::{LanguageModel, MoeModel};
use crate::profile::compute_ap;

pub const HIGH_AP_THRESHOLD: f64 = 0.9;

/// Mean activation of one unit over the tokens of one sample routed to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitSample {
    /// Position of the sample in the analyzed corpus.
    pub sample: usize,
    pub language: String,
    pub token_count: usize,
    pub mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitActivations {
    pub layer: usize,
    pub unit: usize,
    pub width: usize,
    /// Only samples that routed at least one token here, in corpus order.
    pub samples: Vec<UnitSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertActivations {
    /// Languages in order of first appearance in the corpus.
    pub languages: Vec<String>,
    /// Ordered by (layer, unit).
    pub units: Vec<UnitActivations>,
}

/// Runs every sample through `model`, tracking which unit processed which
/// token, and averages each unit's hidden activations per sample.
pub fn collect_expert_activations(model: &MoeModel, corpus: &LabeledCorpus) -> Result<ExpertActivations> {
    if corpus.samples.is_empty() {
        return Err(Error::Validation("cannot analyze an empty corpus".into()));
    }
    let n_layers = model.config().n_layers;
    let width = model.config().d_ff;
    let per_sample: Vec<Result<Vec<Vec<Option<(usize, Vec<f64>)>>>>> = corpus
        .samples
        .par_iter()
        .map(|s| {
            let res = model.forward(&s.tokens, true)?;
            let hidden = res.probes.expect("probes requested").unit_hidden;
            Ok((0..n_layers)
                .map(|l| {
                    let mut sums: Vec<Option<(usize, Vec<f64>)>> = vec![None; model.n_units(l)];
                    for token in &hidden[l] {
                        for (unit, g) in token {
                            let (count, sum) = sums[*unit].get_or_insert_with(|| (0, vec![0.0; g.len()]));
                            *count += 1;
                            for (acc, v) in sum.iter_mut().zip(g) {
                                *acc += v;
                            }
                        }
                    }
                    sums
                })
                .collect())
        })
        .collect();

    let mut units: Vec<UnitActivations> = (0..n_layers)
        .flat_map(|layer| {
            (0..model.n_units(layer)).map(move |unit| UnitActivations {
                layer,
                unit,
                width,
                samples: Vec::new(),
            })
        })
        .collect();
    for (index, (sample, sums)) in corpus.samples.iter().zip(per_sample).enumerate() {
        let mut slot = 0;
        for layer_sums in sums? {
            for entry in layer_sums {
                if let Some((count, sum)) = entry {
                    units[slot].samples.push(UnitSample {
                        sample: index,
                        language: sample.language.clone(),
                        token_count: count,
                        mean: sum.into_iter().map(|v| v / count as f64).collect(),
                    });
                }
                slot += 1;
            }
        }
    }

    let mut languages: Vec<String> = Vec::new();
    for s in &corpus.samples {
        if !languages.contains(&s.language) {
            languages.push(s.language.clone());
        }
    }
    Ok(ExpertActivations { languages, units })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitAp {
    pub layer: usize,
    pub unit: usize,
    pub width: usize,
    /// Number of samples in this unit's ranking population.
    pub population: usize,
    /// Indexed like the report's languages; `None` where AP is undefined
    /// (the language is absent from the population, or is all of it).
    pub scores: Vec<Option<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertApReport {
    pub languages: Vec<String>,
    pub units: Vec<UnitAp>,
}

/// One-vs-rest AP of every neuron of every unit, over the samples that
/// reached that unit.
pub fn expert_ap(activations: &ExpertActivations) -> Result<ExpertApReport> {
    let units = activations
        .units
        .par_iter()
        .map(|u| {
            let scores = activations
                .languages
                .iter()
                .map(|lang| {
                    let labels: Vec<bool> = u.samples.iter().map(|s| &s.language == lang).collect();
                    let positives = labels.iter().filter(|&&y| y).count();
                    if positives == 0 || positives == labels.len() {
                        return Ok(None);
                    }
                    (0..u.width)
                        .map(|n| {
                            let column: Vec<f64> = u.samples.iter().map(|s| s.mean[n]).collect();
                            compute_ap(&column, &labels)
                        })
                        .collect::<Result<Vec<f64>>>()
                        .map(Some)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(UnitAp {
                layer: u.layer,
                unit: u.unit,
                width: u.width,
                population: u.samples.len(),
                scores,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExpertApReport {
        languages: activations.languages.clone(),
        units,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighApRow {
    pub layer: usize,
    pub unit: usize,
    pub width: usize,
    /// Per language; `None` where AP is undefined for the unit.
    pub counts: Vec<Option<usize>>,
}

impl HighApRow {
    pub fn ratio(&self, language: usize) -> Option<f64> {
        self.counts[language].map(|c| c as f64 / self.width as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighApCounts {
    pub threshold: f64,
    pub languages: Vec<String>,
    pub rows: Vec<HighApRow>,
}

/// Counts neurons with AP at or above `threshold` per unit and language.
pub fn high_ap_counts(report: &ExpertApReport, threshold: f64) -> HighApCounts {
    HighApCounts {
        threshold,
        languages: report.languages.clone(),
        rows: report
            .units
            .iter()
            .map(|u| HighApRow {
                layer: u.layer,
                unit: u.unit,
                width: u.width,
                counts: u
                    .scores
                    .iter()
                    .map(|s| s.as_ref().map(|aps| aps.iter().filter(|&&ap| ap >= threshold).count()))
                    .collect(),
            })
            .collect(),
    }
}

impl HighApCounts {
    pub fn language_index(&self, language: &str) -> Option<usize> {
        self.languages.iter().position(|l| l == language)
    }

    /// `layer,unit,<languages...>` with the high-AP ratio in each cell; an
    /// empty cell where AP is undefined.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,unit");
        for lang in &self.languages {
            out.push(',');
            out.push_str(lang);
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{},{}", row.layer, row.unit);
            for l in 0..self.languages.len() {
                out.push(',');
                if let Some(r) = row.ratio(l) {
                    let _ = write!(out, "{r}");
                }
            }
            out.push('\n');
        }
        out
    }

    /// Per-unit table for one language: layer, unit label, count, percent.
    pub fn render_table(&self, language: &str) -> Result<String> {
        let l = self
            .language_index(language)
            .ok_or_else(|| Error::Validation(format!("no language `{language}` in the report")))?;
        let mut out = format!(
            "High-AP neurons (AP >= {}) for {language}\n{:<6} {:<12} {:>8} {:>10}\n",
            self.threshold, "Layer", "Unit", "Count", "Ratio (%)"
        );
        for row in &self.rows {
            let (count, pct) = match row.counts[l] {
                Some(c) => (c.to_string(), format!("{:.2}", 100.0 * c as f64 / row.width as f64)),
                None => ("-".to_string(), "-".to_string()),
            };
            let _ = writeln!(
                out,
                "{:<6} {:<12} {:>8} {:>10}",
                row.layer,
                MoeModel::unit_label(row.unit),
                count,
                pct
            );
        }
        Ok(out)
    }

    /// Tables for every language, separated by blank lines.
    pub fn render_all(&self) -> String {
        self.languages
            .iter()
            .map(|l| self.render_table(l).expect("language from the report"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Writes the ratio grid to `path` and the rendered tables next to it with
/// a `.txt` extension.
pub fn export_heatmap(counts: &HighApCounts, path: &Path) -> Result<()> {
    fs::write(path, counts.to_csv())?;
    fs::write(path.with_extension("txt"), counts.render_all())?;
    Ok(())
}
