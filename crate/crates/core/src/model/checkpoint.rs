//! Binary checkpoints: `NMCK`, version, length-prefixed JSON header, then
//! every tensor as name, rank, dims and a row-major binary64 payload. All
//! integers are little-endian `u64` except the `u32` version.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DenseModel, ForwardResult, Gradients, LanguageModel, LossParts, ModelConfig, MoeModel};
use crate::alloc::AllocationPlan;
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Dense(DenseModel),
    Moe(MoeModel),
}

impl AnyModel {
    pub fn into_dense(self) -> Result<DenseModel> {
        match self {
            AnyModel::Dense(m) => Ok(m),
            AnyModel::Moe(_) => Err(Error::Validation("expected a dense checkpoint, found MoE".into())),
        }
    }

    pub fn into_moe(self) -> Result<MoeModel> {
        match self {
            AnyModel::Moe(m) => Ok(m),
            AnyModel::Dense(_) => Err(Error::Validation("expected an MoE checkpoint, found dense".into())),
        }
    }

    fn inner(&self) -> &dyn LanguageModel {
        match self {
            AnyModel::Dense(m) => m,
            AnyModel::Moe(m) => m,
        }
    }
}

impl From<DenseModel> for AnyModel {
    fn from(m: DenseModel) -> Self {
        AnyModel::Dense(m)
    }
}

impl From<MoeModel> for AnyModel {
    fn from(m: MoeModel) -> Self {
        AnyModel::Moe(m)
    }
}

impl LanguageModel for AnyModel {
    fn config(&self) -> &ModelConfig {
        self.inner().config()
    }

    fn forward(&self, tokens: &[TokenId], probes: bool) -> Result<ForwardResult> {
        self.inner().forward(tokens, probes)
    }

    fn loss_parts_and_grads(&self, batch: &[Vec<TokenId>]) -> Result<(LossParts, Gradients)> {
        self.inner().loss_parts_and_grads(batch)
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.inner().named_tensors()
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            AnyModel::Dense(m) => m.named_tensors_mut(),
            AnyModel::Moe(m) => m.named_tensors_mut(),
        }
    }

    fn is_trainable(&self, name: &str) -> bool {
        self.inner().is_trainable(name)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Dense,
    Moe,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: Kind,
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    plan: Option<AllocationPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<BTreeMap<String, bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aux_coefficient: Option<f64>,
    tensor_count: usize,
}

pub fn save_checkpoint(model: &AnyModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AnyModel> {
    decode(&fs::read(path)?)
}

pub(crate) fn encode(model: &AnyModel) -> Result<Vec<u8>> {
    let tensors = model.named_tensors();
    let header = match model {
        AnyModel::Dense(m) => Header {
            kind: Kind::Dense,
            config: m.config.clone(),
            plan: None,
            mask: None,
            aux_coefficient: None,
            tensor_count: tensors.len(),
        },
        AnyModel::Moe(m) => Header {
            kind: Kind::Moe,
            config: m.base.config.clone(),
            plan: Some(m.plan.clone()),
            mask: Some(m.mask.clone()),
            aux_coefficient: Some(m.aux_coefficient),
            tensor_count: tensors.len(),
        },
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} available",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Format(format!("{what} {v} is too large")))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<AnyModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}, expected NMCK")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let header_len = r.len("header length")?;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;

    let mut model = match header.kind {
        Kind::Dense => AnyModel::Dense(DenseModel::init(&header.config, 0)?),
        Kind::Moe => {
            let plan = header
                .plan
                .ok_or_else(|| Error::Format("MoE checkpoint without a plan".into()))?;
            let dense = DenseModel::init(&header.config, 0)?;
            let mut moe = MoeModel::upcycle(&dense, &plan)?;
            let mask = header
                .mask
                .ok_or_else(|| Error::Format("MoE checkpoint without a mask".into()))?;
            if mask.len() != moe.mask.len() || mask.keys().any(|k| !moe.mask.contains_key(k)) {
                return Err(Error::Format("mask does not match the model's tensors".into()));
            }
            moe.mask = mask;
            moe.aux_coefficient = header.aux_coefficient.unwrap_or(moe.aux_coefficient);
            AnyModel::Moe(moe)
        }
    };

    let mut slots = model.named_tensors_mut();
    if slots.len() != header.tensor_count {
        return Err(Error::Format(format!(
            "header lists {} tensors, model layout has {}",
            header.tensor_count,
            slots.len()
        )));
    }
    for (expected_name, slot) in slots.iter_mut() {
        let name_len = r.len("tensor name length")?;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if name != expected_name {
            return Err(Error::Format(format!(
                "expected tensor `{expected_name}`, found `{name}`"
            )));
        }
        let rank = r.len("tensor rank")?;
        let dims = (0..rank)
            .map(|_| r.len("tensor dim"))
            .collect::<Result<Vec<usize>>>()?;
        if dims != slot.shape() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                found: dims,
            });
        }
        let payload = r.take(slot.len() * 8, &format!("payload of `{name}`"))?;
        for (v, chunk) in slot.data_mut().iter_mut().zip(payload.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    drop(slots);
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DenseModel {
        let cfg = ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 10,
            max_seq_len: 6,
        };
        DenseModel::init(&cfg, 9).unwrap()
    }

    #[test]
    fn dense_round_trip_is_bit_exact() {
        let m = AnyModel::Dense(small());
        let back = decode(&encode(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let a = m.forward(&[1, 2, 3], false).unwrap();
        let b = back.forward(&[1, 2, 3], false).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn moe_round_trip_keeps_plan_and_mask() {
        let plan = AllocationPlan::from_counts(&[1, 2], 1, 2).unwrap();
        let mut moe = MoeModel::upcycle(&small(), &plan).unwrap();
        moe.set_stage_mask(2).unwrap();
        moe.layers[1].router.data_mut()[3] = 0.25;
        let m = AnyModel::Moe(moe);
        let back = decode(&encode(&m).unwrap()).unwrap().into_moe().unwrap();
        assert_eq!(back.plan, plan);
        assert_eq!(AnyModel::Moe(back), m);
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode(&AnyModel::Dense(small())).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::VersionMismatch { found: 9, .. })));

        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));

        // shrink the first tensor's leading dim in place
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let first = 16 + header_len;
        let name_len = u64::from_le_bytes(bytes[first..first + 8].try_into().unwrap()) as usize;
        let dim0 = first + 8 + name_len + 8;
        let mut bad = bytes.clone();
        bad[dim0..dim0 + 8].copy_from_slice(&11u64.to_le_bytes());
        assert!(matches!(decode(&bad), Err(Error::ShapeMismatch { .. })));
    }
}
