//! Forward pass and hand-written backward pass shared by the dense and the
//! mixture-of-experts model.

use rayon::prelude::*;

use super::moe::{aux_load_balance, layer_balance_stats, MoeLayer, MoeModel, TOP_K};
use super::params::{DenseModel, LayerNorm, Mlp};
use super::{
    check_tokens, ForwardResult, LayerRouting, LossParts, ProbeCapture, Probes, RoutingRecord,
    TokenRoute,
};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::tensor::{dot, outer_acc, softmax_in_place, vec_mat_acc, vec_mat_t_acc};
use crate::trace::{Component, ProbePoint};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + GELU_K * z * z * z)).tanh())
}

fn gelu_grad(z: f64) -> f64 {
    let th = (GELU_C * (z + GELU_K * z * z * z)).tanh();
    0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * z * z)
}

/// Gradient accumulator shaped like the model.
pub(crate) struct GradSet {
    pub base: DenseModel,
    pub moe: Vec<MoeLayer>,
}

impl GradSet {
    fn add(&mut self, other: &GradSet) {
        let lhs = self.base.tensors_mut();
        for ((_, a), (_, b)) in lhs.into_iter().zip(other.base.tensors()) {
            a.add_assign(b);
        }
        for (a, b) in self.moe.iter_mut().zip(&other.moe) {
            a.router.add_assign(&b.router);
            for (ea, eb) in a.experts.iter_mut().zip(&b.experts) {
                ea.w_in.add_assign(&eb.w_in);
                ea.b_in.add_assign(&eb.b_in);
                ea.w_out.add_assign(&eb.w_out);
                ea.b_out.add_assign(&eb.b_out);
            }
        }
    }
}

pub(crate) struct Network<'a> {
    base: &'a DenseModel,
    moe: Option<&'a [MoeLayer]>,
    alpha: f64,
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct UnitCache {
    unit: usize,
    z: Vec<f64>,
    g: Vec<f64>,
    y: Vec<f64>,
}

struct TokenMlpCache {
    units: Vec<UnitCache>,
    weights: Vec<f64>,
    /// Router softmax; empty for dense layers.
    probs: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LnCache,
    m: Vec<f64>,
    mlp: Vec<TokenMlpCache>,
    /// Per-unit aux-loss gradient seed `∂aux/∂p_{t,e}` (same for every token).
    aux_seed: Vec<f64>,
}

struct SeqCache {
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    f: Vec<f64>,
    softmax: Vec<f64>,
}

fn ln_forward(x: &[f64], rows: usize, ln: &LayerNorm) -> (Vec<f64>, LnCache) {
    let d = ln.gamma.len();
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for t in 0..rows {
        let row = &x[t * d..(t + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = r;
        for i in 0..d {
            let h = (row[i] - mean) * r;
            xhat[t * d + i] = h;
            y[t * d + i] = ln.gamma.data()[i] * h + ln.beta.data()[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn ln_backward(dy: &[f64], cache: &LnCache, ln: &LayerNorm, grad: &mut LayerNorm) -> Vec<f64> {
    let d = ln.gamma.len();
    let rows = cache.rstd.len();
    let mut dx = vec![0.0; rows * d];
    let mut dxhat = vec![0.0; d];
    for t in 0..rows {
        let dyr = &dy[t * d..(t + 1) * d];
        let xh = &cache.xhat[t * d..(t + 1) * d];
        for i in 0..d {
            grad.gamma.data_mut()[i] += dyr[i] * xh[i];
            grad.beta.data_mut()[i] += dyr[i];
            dxhat[i] = dyr[i] * ln.gamma.data()[i];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xh) / d as f64;
        for i in 0..d {
            dx[t * d + i] = cache.rstd[t] * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
    dx
}

fn mlp_forward(mlp: &Mlp, m: &[f64], unit: usize) -> UnitCache {
    let mut z = mlp.b_in.data().to_vec();
    vec_mat_acc(m, mlp.w_in.data(), &mut z);
    let g: Vec<f64> = z.iter().map(|&v| gelu(v)).collect();
    let mut y = mlp.b_out.data().to_vec();
    vec_mat_acc(&g, mlp.w_out.data(), &mut y);
    UnitCache { unit, z, g, y }
}

fn mlp_backward(mlp: &Mlp, grad: &mut Mlp, m: &[f64], cache: &UnitCache, dy: &[f64], dm: &mut [f64]) {
    for (b, d) in grad.b_out.data_mut().iter_mut().zip(dy) {
        *b += d;
    }
    outer_acc(&cache.g, dy, grad.w_out.data_mut());
    let mut dz = vec![0.0; cache.z.len()];
    vec_mat_t_acc(dy, mlp.w_out.data(), &mut dz);
    for (d, &z) in dz.iter_mut().zip(&cache.z) {
        *d *= gelu_grad(z);
    }
    for (b, d) in grad.b_in.data_mut().iter_mut().zip(&dz) {
        *b += d;
    }
    outer_acc(m, &dz, grad.w_in.data_mut());
    vec_mat_t_acc(&dz, mlp.w_in.data(), dm);
}

/// Top-k unit indices by router logit, ties to the lower index.
pub(crate) fn select_top_k(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k.min(logits.len()));
    idx
}

impl<'a> Network<'a> {
    pub(crate) fn dense(model: &'a DenseModel) -> Self {
        Self {
            base: model,
            moe: None,
            alpha: 0.0,
        }
    }

    pub(crate) fn moe(model: &'a MoeModel) -> Self {
        Self {
            base: &model.base,
            moe: Some(&model.layers),
            alpha: model.aux_coefficient,
        }
    }

    fn unit<'m>(&'m self, layer: usize, unit: usize) -> &'m Mlp {
        if unit == 0 {
            &self.base.blocks[layer].mlp
        } else {
            &self.moe.expect("expert unit on dense model")[layer].experts[unit - 1]
        }
    }

    fn run(&self, tokens: &[TokenId], probes: bool) -> Result<(ForwardResult, SeqCache)> {
        let cfg = &self.base.config;
        check_tokens(cfg, tokens)?;
        let t_len = tokens.len();
        let d = cfg.d_model;
        let n_heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = vec![0.0; t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let row = &mut x[t * d..(t + 1) * d];
            for ((r, e), p) in row
                .iter_mut()
                .zip(self.base.tok_emb.row(tok as usize))
                .zip(self.base.pos_emb.row(t))
            {
                *r = e + p;
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        let mut routing = RoutingRecord::default();
        let mut captures = Vec::new();
        let mut unit_hidden = Vec::new();

        for (l, block) in self.base.blocks.iter().enumerate() {
            // attention
            let (a, ln1) = ln_forward(&x, t_len, &block.ln1);
            let mut q = vec![0.0; t_len * d];
            let mut k = vec![0.0; t_len * d];
            let mut v = vec![0.0; t_len * d];
            for t in 0..t_len {
                let ar = &a[t * d..(t + 1) * d];
                vec_mat_acc(ar, block.attn.wq.data(), &mut q[t * d..(t + 1) * d]);
                vec_mat_acc(ar, block.attn.wk.data(), &mut k[t * d..(t + 1) * d]);
                vec_mat_acc(ar, block.attn.wv.data(), &mut v[t * d..(t + 1) * d]);
            }
            let mut att = vec![0.0; n_heads * t_len * t_len];
            let mut ctx = vec![0.0; t_len * d];
            for h in 0..n_heads {
                let off = h * dh;
                for t in 0..t_len {
                    let base = (h * t_len + t) * t_len;
                    let row = &mut att[base..base + t + 1];
                    let qt = &q[t * d + off..t * d + off + dh];
                    for (u, s) in row.iter_mut().enumerate() {
                        *s = dot(qt, &k[u * d + off..u * d + off + dh]) * scale;
                    }
                    softmax_in_place(row);
                    let c = &mut ctx[t * d + off..t * d + off + dh];
                    for (u, &p) in row.iter().enumerate() {
                        for (ci, vi) in c.iter_mut().zip(&v[u * d + off..u * d + off + dh]) {
                            *ci += p * vi;
                        }
                    }
                }
            }
            let mut attn_out = vec![0.0; t_len * d];
            for t in 0..t_len {
                vec_mat_acc(
                    &ctx[t * d..(t + 1) * d],
                    block.attn.wo.data(),
                    &mut attn_out[t * d..(t + 1) * d],
                );
            }
            for (xi, oi) in x.iter_mut().zip(&attn_out) {
                *xi += oi;
            }
            if probes {
                captures.push(ProbeCapture {
                    point: ProbePoint {
                        layer: l,
                        component: Component::AttentionOutput,
                        width: d,
                    },
                    values: attn_out,
                });
            }

            // feed-forward
            let (m, ln2) = ln_forward(&x, t_len, &block.ln2);
            let moe_layer = self.moe.map(|layers| &layers[l]);
            let mut mlp_caches = Vec::with_capacity(t_len);
            let mut layer_routes = Vec::new();
            for t in 0..t_len {
                let mt = &m[t * d..(t + 1) * d];
                let cache = match moe_layer {
                    None => TokenMlpCache {
                        units: vec![mlp_forward(&block.mlp, mt, 0)],
                        weights: vec![1.0],
                        probs: Vec::new(),
                    },
                    Some(layer) => {
                        let n = layer.n_units();
                        let mut logits = vec![0.0; n];
                        vec_mat_acc(mt, layer.router.data(), &mut logits);
                        let selected = select_top_k(&logits, TOP_K);
                        let mut probs = logits;
                        softmax_in_place(&mut probs);
                        let z: f64 = selected.iter().map(|&u| probs[u]).sum();
                        let weights: Vec<f64> = selected.iter().map(|&u| probs[u] / z).collect();
                        let units = selected
                            .iter()
                            .map(|&u| mlp_forward(self.unit(l, u), mt, u))
                            .collect();
                        layer_routes.push(TokenRoute {
                            units: selected,
                            weights: weights.clone(),
                            probs: probs.clone(),
                        });
                        TokenMlpCache {
                            units,
                            weights,
                            probs,
                        }
                    }
                };
                let row = &mut x[t * d..(t + 1) * d];
                for (uc, &w) in cache.units.iter().zip(&cache.weights) {
                    for (xi, yi) in row.iter_mut().zip(&uc.y) {
                        *xi += w * yi;
                    }
                }
                mlp_caches.push(cache);
            }
            if probes {
                let ff = block.mlp.hidden_width();
                let mut hidden = vec![0.0; t_len * ff];
                let mut per_token = Vec::with_capacity(t_len);
                for (t, c) in mlp_caches.iter().enumerate() {
                    let row = &mut hidden[t * ff..(t + 1) * ff];
                    for (uc, &w) in c.units.iter().zip(&c.weights) {
                        for (h, g) in row.iter_mut().zip(&uc.g) {
                            *h += w * g;
                        }
                    }
                    per_token.push(c.units.iter().map(|uc| (uc.unit, uc.g.clone())).collect());
                }
                captures.push(ProbeCapture {
                    point: ProbePoint {
                        layer: l,
                        component: Component::MlpHidden,
                        width: ff,
                    },
                    values: hidden,
                });
                unit_hidden.push(per_token);
            }
            let mut aux_seed = Vec::new();
            if let Some(layer) = moe_layer {
                let lr = LayerRouting {
                    n_units: layer.n_units(),
                    tokens: layer_routes,
                };
                let (fractions, _) = layer_balance_stats(&lr);
                let c = self.alpha * lr.n_units as f64 / (cfg.n_layers as f64 * t_len as f64);
                aux_seed = fractions.iter().map(|f| c * f).collect();
                routing.layers.push(lr);
            }
            layers.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                att,
                ctx,
                ln2,
                m,
                mlp: mlp_caches,
                aux_seed,
            });
        }

        let (f, lnf) = ln_forward(&x, t_len, &self.base.ln_f);
        let vocab = cfg.vocab_size;
        let mut logits = vec![0.0; t_len * vocab];
        for t in 0..t_len {
            vec_mat_acc(
                &f[t * d..(t + 1) * d],
                self.base.head.data(),
                &mut logits[t * vocab..(t + 1) * vocab],
            );
        }
        let mut softmax = logits.clone();
        let mut nll = 0.0;
        for t in 0..t_len {
            let row = &mut softmax[t * vocab..(t + 1) * vocab];
            softmax_in_place(row);
            if t + 1 < t_len {
                let lrow = &logits[t * vocab..(t + 1) * vocab];
                let max = lrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + lrow.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                nll += lse - lrow[tokens[t + 1] as usize];
            }
        }
        let ce_loss = if t_len > 1 { nll / (t_len - 1) as f64 } else { 0.0 };
        let aux_loss = aux_load_balance(&routing, self.alpha);
        let loss = ce_loss + aux_loss;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {loss}")));
        }

        let result = ForwardResult {
            seq_len: t_len,
            logits,
            loss,
            ce_loss,
            aux_loss,
            routing,
            probes: probes.then_some(Probes {
                captures,
                unit_hidden,
            }),
        };
        let cache = SeqCache {
            tokens: tokens.to_vec(),
            layers,
            lnf,
            f,
            softmax,
        };
        Ok((result, cache))
    }

    pub(crate) fn forward(&self, tokens: &[TokenId], probes: bool) -> Result<ForwardResult> {
        self.run(tokens, probes).map(|(r, _)| r)
    }

    fn zero_grads(&self) -> GradSet {
        GradSet {
            base: self.base.zeros_like(),
            moe: self
                .moe
                .map(|layers| layers.iter().map(MoeLayer::zeros_like).collect())
                .unwrap_or_default(),
        }
    }

    /// Backpropagates `scale * (ce + aux)` of one sequence into `grads`.
    fn backward(&self, cache: &SeqCache, scale: f64, grads: &mut GradSet) {
        let cfg = &self.base.config;
        let tokens = &cache.tokens;
        let t_len = tokens.len();
        let d = cfg.d_model;
        let vocab = cfg.vocab_size;
        let n_heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let att_scale = 1.0 / (dh as f64).sqrt();

        // output head
        let mut df = vec![0.0; t_len * d];
        if t_len > 1 {
            let c = scale / (t_len - 1) as f64;
            let mut dlogits = vec![0.0; vocab];
            for t in 0..t_len - 1 {
                for (dl, p) in dlogits.iter_mut().zip(&cache.softmax[t * vocab..(t + 1) * vocab]) {
                    *dl = p * c;
                }
                dlogits[tokens[t + 1] as usize] -= c;
                let ft = &cache.f[t * d..(t + 1) * d];
                outer_acc(ft, &dlogits, grads.base.head.data_mut());
                vec_mat_t_acc(&dlogits, self.base.head.data(), &mut df[t * d..(t + 1) * d]);
            }
        }
        let mut dx = ln_backward(&df, &cache.lnf, &self.base.ln_f, &mut grads.base.ln_f);

        for l in (0..cfg.n_layers).rev() {
            let block = &self.base.blocks[l];
            let lc = &cache.layers[l];

            // feed-forward
            let mut dm = vec![0.0; t_len * d];
            for t in 0..t_len {
                let dout = &dx[t * d..(t + 1) * d];
                let mt = &lc.m[t * d..(t + 1) * d];
                let tc = &lc.mlp[t];
                let dmt = &mut dm[t * d..(t + 1) * d];
                let mut dw = Vec::with_capacity(tc.units.len());
                for (uc, &w) in tc.units.iter().zip(&tc.weights) {
                    let dy: Vec<f64> = dout.iter().map(|g| w * g).collect();
                    dw.push(dot(dout, &uc.y));
                    let (mlp, grad) = if uc.unit == 0 {
                        (&block.mlp, &mut grads.base.blocks[l].mlp)
                    } else {
                        (
                            self.unit(l, uc.unit),
                            &mut grads.moe[l].experts[uc.unit - 1],
                        )
                    };
                    mlp_backward(mlp, grad, mt, uc, &dy, dmt);
                }
                if let Some(layers) = self.moe {
                    let router = &layers[l].router;
                    let probs = &tc.probs;
                    let z: f64 = tc.units.iter().map(|uc| probs[uc.unit]).sum();
                    let mean_dw: f64 = dw.iter().zip(&tc.weights).map(|(a, b)| a * b).sum();
                    let mut dp: Vec<f64> = lc.aux_seed.iter().map(|s| s * scale).collect();
                    for (uc, g) in tc.units.iter().zip(&dw) {
                        dp[uc.unit] += (g - mean_dw) / z;
                    }
                    let inner = dot(probs, &dp);
                    let dr: Vec<f64> = probs.iter().zip(&dp).map(|(p, g)| p * (g - inner)).collect();
                    outer_acc(mt, &dr, grads.moe[l].router.data_mut());
                    vec_mat_t_acc(&dr, router.data(), dmt);
                }
            }
            let dln2 = ln_backward(&dm, &lc.ln2, &block.ln2, &mut grads.base.blocks[l].ln2);
            for (a, b) in dx.iter_mut().zip(&dln2) {
                *a += b;
            }

            // attention
            let gb = &mut grads.base.blocks[l];
            let mut dctx = vec![0.0; t_len * d];
            for t in 0..t_len {
                let dout = &dx[t * d..(t + 1) * d];
                outer_acc(&lc.ctx[t * d..(t + 1) * d], dout, gb.attn.wo.data_mut());
                vec_mat_t_acc(dout, block.attn.wo.data(), &mut dctx[t * d..(t + 1) * d]);
            }
            let mut dq = vec![0.0; t_len * d];
            let mut dk = vec![0.0; t_len * d];
            let mut dv = vec![0.0; t_len * d];
            let mut dp = vec![0.0; t_len];
            for h in 0..n_heads {
                let off = h * dh;
                for t in 0..t_len {
                    let base = (h * t_len + t) * t_len;
                    let p = &lc.att[base..base + t + 1];
                    let dc = &dctx[t * d + off..t * d + off + dh];
                    for u in 0..=t {
                        dp[u] = dot(dc, &lc.v[u * d + off..u * d + off + dh]);
                        for (dvi, dci) in dv[u * d + off..u * d + off + dh].iter_mut().zip(dc) {
                            *dvi += p[u] * dci;
                        }
                    }
                    let inner: f64 = (0..=t).map(|u| p[u] * dp[u]).sum();
                    for u in 0..=t {
                        let ds = p[u] * (dp[u] - inner) * att_scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for i in 0..dh {
                            dq[t * d + off + i] += ds * lc.k[u * d + off + i];
                            dk[u * d + off + i] += ds * lc.q[t * d + off + i];
                        }
                    }
                }
            }
            let mut da = vec![0.0; t_len * d];
            for t in 0..t_len {
                let r = t * d..(t + 1) * d;
                let at = &lc.a[r.clone()];
                outer_acc(at, &dq[r.clone()], gb.attn.wq.data_mut());
                outer_acc(at, &dk[r.clone()], gb.attn.wk.data_mut());
                outer_acc(at, &dv[r.clone()], gb.attn.wv.data_mut());
                let dat = &mut da[r.clone()];
                vec_mat_t_acc(&dq[r.clone()], block.attn.wq.data(), dat);
                vec_mat_t_acc(&dk[r.clone()], block.attn.wk.data(), dat);
                vec_mat_t_acc(&dv[r], block.attn.wv.data(), dat);
            }
            let dln1 = ln_backward(&da, &lc.ln1, &block.ln1, &mut gb.ln1);
            for (a, b) in dx.iter_mut().zip(&dln1) {
                *a += b;
            }
        }

        for (t, &tok) in tokens.iter().enumerate() {
            let g = &dx[t * d..(t + 1) * d];
            for (e, gi) in grads.base.tok_emb.row_mut(tok as usize).iter_mut().zip(g) {
                *e += gi;
            }
            for (e, gi) in grads.base.pos_emb.row_mut(t).iter_mut().zip(g) {
                *e += gi;
            }
        }
    }

    /// Mean loss over the batch and the full gradient (every tensor, frozen
    /// or not). Sequences are processed in parallel and reduced in order.
    pub(crate) fn loss_and_grads(&self, batch: &[Vec<TokenId>]) -> Result<(LossParts, GradSet)> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let per_seq: Vec<Result<(LossParts, GradSet)>> = batch
            .par_iter()
            .map(|tokens| {
                let (res, cache) = self.run(tokens, false)?;
                let mut g = self.zero_grads();
                self.backward(&cache, scale, &mut g);
                Ok((
                    LossParts {
                        total: res.loss,
                        ce: res.ce_loss,
                        aux: res.aux_loss,
                    },
                    g,
                ))
            })
            .collect();
        let mut parts = LossParts::default();
        let mut total: Option<GradSet> = None;
        for item in per_seq {
            let (p, g) = item?;
            parts.total += p.total * scale;
            parts.ce += p.ce * scale;
            parts.aux += p.aux * scale;
            match total.as_mut() {
                None => total = Some(g),
                Some(acc) => acc.add(&g),
            }
        }
        Ok((parts, total.expect("non-empty batch")))
    }
}
