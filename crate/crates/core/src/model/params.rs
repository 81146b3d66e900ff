use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{engine, ForwardResult, Gradients, LanguageModel, LossParts, ModelConfig};
use crate::corpus::TokenId;
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[width], 1.0),
            beta: Tensor::zeros(&[width]),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            gamma: Tensor::zeros_like(&self.gamma),
            beta: Tensor::zeros_like(&self.beta),
        }
    }

    fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    fn push_named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }
}

/// Multi-head causal self-attention; all projections are `d_model × d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

/// Two-layer GELU MLP: `w_in` is `d_model × d_ff`, `w_out` is `d_ff × d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl Mlp {
    fn init(d_model: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w_in: uniform(&[d_model, d_ff], d_model, rng),
            b_in: Tensor::zeros(&[d_ff]),
            w_out: uniform(&[d_ff, d_model], d_ff, rng),
            b_out: Tensor::zeros(&[d_model]),
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            w_in: Tensor::zeros_like(&self.w_in),
            b_in: Tensor::zeros_like(&self.b_in),
            w_out: Tensor::zeros_like(&self.w_out),
            b_out: Tensor::zeros_like(&self.b_out),
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.b_in.len()
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w_in"), &self.w_in));
        out.push((format!("{prefix}.b_in"), &self.b_in));
        out.push((format!("{prefix}.w_out"), &self.w_out));
        out.push((format!("{prefix}.b_out"), &self.b_out));
    }

    pub(crate) fn push_named_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        out.push((format!("{prefix}.w_in"), &mut self.w_in));
        out.push((format!("{prefix}.b_in"), &mut self.b_in));
        out.push((format!("{prefix}.w_out"), &mut self.w_out));
        out.push((format!("{prefix}.b_out"), &mut self.b_out));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

/// Pre-norm decoder-only transformer with learned positions and an untied
/// output head.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseModel {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Tensor,
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    t
}

impl DenseModel {
    /// Scaled-uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    /// Embeddings use `d_model` as fan-in; norms start at identity.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let tok_emb = uniform(&[config.vocab_size, d], d, &mut rng);
        let pos_emb = uniform(&[config.max_seq_len, d], d, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                attn: Attention {
                    wq: uniform(&[d, d], d, &mut rng),
                    wk: uniform(&[d, d], d, &mut rng),
                    wv: uniform(&[d, d], d, &mut rng),
                    wo: uniform(&[d, d], d, &mut rng),
                },
                ln2: LayerNorm::new(d),
                mlp: Mlp::init(d, config.d_ff, &mut rng),
            })
            .collect();
        let head = uniform(&[d, config.vocab_size], d, &mut rng);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNorm::new(d),
            head,
        })
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            tok_emb: Tensor::zeros_like(&self.tok_emb),
            pos_emb: Tensor::zeros_like(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: b.ln1.zeros_like(),
                    attn: Attention {
                        wq: Tensor::zeros_like(&b.attn.wq),
                        wk: Tensor::zeros_like(&b.attn.wk),
                        wv: Tensor::zeros_like(&b.attn.wv),
                        wo: Tensor::zeros_like(&b.attn.wo),
                    },
                    ln2: b.ln2.zeros_like(),
                    mlp: b.mlp.zeros_like(),
                })
                .collect(),
            ln_f: self.ln_f.zeros_like(),
            head: Tensor::zeros_like(&self.head),
        }
    }

    pub(crate) fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("layers.{l}");
            b.ln1.push_named(&format!("{p}.ln1"), &mut out);
            out.push((format!("{p}.attn.wq"), &b.attn.wq));
            out.push((format!("{p}.attn.wk"), &b.attn.wk));
            out.push((format!("{p}.attn.wv"), &b.attn.wv));
            out.push((format!("{p}.attn.wo"), &b.attn.wo));
            b.ln2.push_named(&format!("{p}.ln2"), &mut out);
            b.mlp.push_named(&format!("{p}.mlp"), &mut out);
        }
        self.ln_f.push_named("ln_f", &mut out);
        out.push(("head".to_string(), &self.head));
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("layers.{l}");
            b.ln1.push_named_mut(&format!("{p}.ln1"), &mut out);
            out.push((format!("{p}.attn.wq"), &mut b.attn.wq));
            out.push((format!("{p}.attn.wk"), &mut b.attn.wk));
            out.push((format!("{p}.attn.wv"), &mut b.attn.wv));
            out.push((format!("{p}.attn.wo"), &mut b.attn.wo));
            b.ln2.push_named_mut(&format!("{p}.ln2"), &mut out);
            b.mlp.push_named_mut(&format!("{p}.mlp"), &mut out);
        }
        self.ln_f.push_named_mut("ln_f", &mut out);
        out.push(("head".to_string(), &mut self.head));
        out
    }
}

impl LanguageModel for DenseModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward(&self, tokens: &[TokenId], probes: bool) -> Result<ForwardResult> {
        engine::Network::dense(self).forward(tokens, probes)
    }

    fn loss_parts_and_grads(&self, batch: &[Vec<TokenId>]) -> Result<(LossParts, Gradients)> {
        let (parts, grads) = engine::Network::dense(self).loss_and_grads(batch)?;
        let named = grads
            .base
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        Ok((parts, Gradients(named)))
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.tensors()
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.tensors_mut()
    }

    fn is_trainable(&self, _name: &str) -> bool {
        true
    }
}
