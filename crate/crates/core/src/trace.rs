//! Sample-level activation traces over a labeled corpus.
//!
//! A trace is a `samples × neurons` matrix whose columns are the probe
//! points of the model concatenated in manifest order. On disk it is a JSON
//! manifest next to a flat binary32 payload.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledCorpus;
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::profile::NeuronId;

pub const TRACE_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"NMTR";
const PAYLOAD_HEADER_LEN: usize = 4 + 4 + 8 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    AttentionOutput,
    MlpHidden,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::AttentionOutput => "attention-output",
            Component::MlpHidden => "mlp-hidden",
        })
    }
}

impl std::str::FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention-output" => Ok(Component::AttentionOutput),
            "mlp-hidden" => Ok(Component::MlpHidden),
            other => Err(Error::Validation(format!("unknown component `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProbePoint {
    pub layer: usize,
    pub component: Component,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleLabel {
    pub id: u64,
    pub language: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub version: u32,
    pub model_id: String,
    pub probe_points: Vec<ProbePoint>,
    pub samples: Vec<SampleLabel>,
}

impl TraceManifest {
    pub fn n_cols(&self) -> usize {
        self.probe_points.iter().map(|p| p.width).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != TRACE_VERSION {
            return Err(Error::VersionMismatch {
                expected: TRACE_VERSION,
                found: self.version,
            });
        }
        let mut seen = HashSet::new();
        for p in &self.probe_points {
            if p.width == 0 {
                return Err(Error::Validation(format!(
                    "probe point ({}, {}) has zero width",
                    p.layer, p.component
                )));
            }
            if !seen.insert((p.layer, p.component)) {
                return Err(Error::Validation(format!(
                    "duplicate probe point ({}, {})",
                    p.layer, p.component
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub manifest: TraceManifest,
    /// Row-major `samples × neurons`.
    pub values: Vec<f32>,
}

impl ActivationTrace {
    pub fn n_rows(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn n_cols(&self) -> usize {
        self.manifest.n_cols()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.n_cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        let c = self.n_cols();
        (0..self.n_rows()).map(|i| f64::from(self.values[i * c + j])).collect()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.manifest.samples.iter().map(|s| s.language.as_str()).collect()
    }

    /// Distinct languages in order of first appearance.
    pub fn languages(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.manifest.samples {
            if !out.contains(&s.language) {
                out.push(s.language.clone());
            }
        }
        out
    }

    pub fn column_of(&self, neuron: NeuronId) -> Option<usize> {
        let mut offset = 0;
        for p in &self.manifest.probe_points {
            if p.layer == neuron.layer && p.component == neuron.component {
                return (neuron.index < p.width).then_some(offset + neuron.index);
            }
            offset += p.width;
        }
        None
    }

    pub fn neuron_at(&self, column: usize) -> Option<NeuronId> {
        let mut offset = 0;
        for p in &self.manifest.probe_points {
            if column < offset + p.width {
                return Some(NeuronId::new(p.layer, p.component, column - offset));
            }
            offset += p.width;
        }
        None
    }

    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        let expected = self.n_rows() * self.n_cols();
        if self.values.len() != expected {
            return Err(Error::Format(format!(
                "trace holds {} values, manifest implies {expected}",
                self.values.len()
            )));
        }
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite activation at index {pos}")));
        }
        Ok(())
    }
}

/// Runs every sample through the model with probes on and averages each
/// neuron's token-level activations over the sample's tokens.
pub fn record_trace<M: LanguageModel + ?Sized>(model: &M, corpus: &LabeledCorpus) -> Result<ActivationTrace> {
    if corpus.samples.is_empty() {
        return Err(Error::Validation("cannot trace an empty corpus".into()));
    }
    let probe_points = model.config().probe_points();
    let n_cols: usize = probe_points.iter().map(|p| p.width).sum();
    let rows: Vec<Result<Vec<f32>>> = corpus
        .samples
        .par_iter()
        .map(|sample| {
            let result = model.forward(&sample.tokens, true)?;
            let probes = result.probes.expect("probes requested");
            let t_len = sample.tokens.len() as f64;
            let mut row = Vec::with_capacity(n_cols);
            for cap in &probes.captures {
                let w = cap.point.width;
                let mut mean = vec![0.0f64; w];
                for chunk in cap.values.chunks_exact(w) {
                    for (m, v) in mean.iter_mut().zip(chunk) {
                        *m += v;
                    }
                }
                row.extend(mean.iter().map(|m| (m / t_len) as f32));
            }
            Ok(row)
        })
        .collect();
    let mut values = Vec::with_capacity(corpus.samples.len() * n_cols);
    for row in rows {
        values.extend(row?);
    }
    let trace = ActivationTrace {
        manifest: TraceManifest {
            version: TRACE_VERSION,
            model_id: model.model_id(),
            probe_points,
            samples: corpus
                .samples
                .iter()
                .map(|s| SampleLabel {
                    id: s.id,
                    language: s.language.clone(),
                })
                .collect(),
        },
        values,
    };
    trace.validate()?;
    Ok(trace)
}

/// `<stem>.manifest.json` and `<stem>.act`.
pub fn trace_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_string_lossy();
    (
        PathBuf::from(format!("{s}.manifest.json")),
        PathBuf::from(format!("{s}.act")),
    )
}

pub fn write_trace(trace: &ActivationTrace, stem: &Path) -> Result<()> {
    trace.validate()?;
    let (manifest_path, act_path) = trace_paths(stem);
    let mut json = serde_json::to_string_pretty(&trace.manifest)?;
    json.push('\n');
    fs::write(manifest_path, json)?;
    fs::write(act_path, encode_payload(trace))?;
    Ok(())
}

pub fn read_trace(stem: &Path) -> Result<ActivationTrace> {
    let (manifest_path, act_path) = trace_paths(stem);
    let manifest: TraceManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)
        .map_err(|e| Error::parse(format!("manifest line {}", e.line()), e.to_string()))?;
    decode_payload(manifest, &fs::read(act_path)?)
}

fn encode_payload(trace: &ActivationTrace) -> Vec<u8> {
    let mut out = Vec::with_capacity(PAYLOAD_HEADER_LEN + trace.values.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&TRACE_VERSION.to_le_bytes());
    out.extend_from_slice(&(trace.n_rows() as u64).to_le_bytes());
    out.extend_from_slice(&(trace.n_cols() as u64).to_le_bytes());
    for v in &trace.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_payload(manifest: TraceManifest, bytes: &[u8]) -> Result<ActivationTrace> {
    manifest.validate()?;
    if bytes.len() < PAYLOAD_HEADER_LEN {
        return Err(Error::Format(format!(
            "payload header needs {PAYLOAD_HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad payload magic, expected NMTR".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != TRACE_VERSION {
        return Err(Error::VersionMismatch {
            expected: TRACE_VERSION,
            found: version,
        });
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    if rows != manifest.samples.len() || cols != manifest.n_cols() {
        return Err(Error::Format(format!(
            "payload is {rows}×{cols}, manifest describes {}×{}",
            manifest.samples.len(),
            manifest.n_cols()
        )));
    }
    let expected = PAYLOAD_HEADER_LEN + rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "payload length mismatch: expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let values = bytes[PAYLOAD_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let trace = ActivationTrace { manifest, values };
    trace.validate()?;
    Ok(trace)
}
