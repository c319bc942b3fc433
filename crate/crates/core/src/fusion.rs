//! Uncertainty-derived modality weights and the transformer fusion stack
//! with shared queries and per-modality, weight-scaled keys and values.

use crate::config::{FusionKind, ModelConfig};
use crate::nn::{Activation, LayerNorm, Mlp};
use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, Tensor, Var};

type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WeightError {
    #[error("r has {r} entries but s has {s}")]
    Length { r: usize, s: usize },
    #[error("{which}[{index}] = {value} is below the floor {floor}")]
    BelowFloor { which: &'static str, index: usize, value: f64, floor: f64 },
}

/// Normalized inverse-uncertainty weights, `w_m ∝ 1 / (r_m s_m)`.
///
/// Evaluated in the log domain as `softmax(-ln r - ln s)`, which is the same
/// quantity without overflow for tiny uncertainties.
pub fn modality_weights(r: &[f64], s: &[f64], floor: f64) -> std::result::Result<Vec<f64>, WeightError> {
    if r.len() != s.len() {
        return Err(WeightError::Length { r: r.len(), s: s.len() });
    }
    for (which, v) in [("r", r), ("s", s)] {
        if let Some((index, &value)) = v.iter().enumerate().find(|(_, x)| !(**x >= floor)) {
            return Err(WeightError::BelowFloor { which, index, value, floor });
        }
    }
    let logits: Vec<f64> = r.iter().zip(s).map(|(a, b)| -a.ln() - b.ln()).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Graph form of [`modality_weights`]: `r[m]`, `s[m]` are `[B]` score
/// vectors (`None` means the factor is disabled). Returns `[B, M]`.
pub fn weights_graph(g: &mut Graph, r: &[Option<Var>], s: &[Option<Var>]) -> Result<Var> {
    let m = r.len();
    let mut cols = Vec::with_capacity(m);
    let mut batch = None;
    for (ri, si) in r.iter().zip(s) {
        let mut logit: Option<Var> = None;
        for v in [ri, si].into_iter().flatten() {
            batch = Some(g.shape(*v)[0]);
            let l = g.ln(*v);
            let nl = g.neg(l);
            logit = Some(match logit {
                None => nl,
                Some(acc) => g.add(acc, nl)?,
            });
        }
        cols.push(logit);
    }
    let batch = batch.ok_or_else(|| NumericsError::Shape("weights need at least one uncertainty score".into()))?;
    let cols: Vec<Var> = cols
        .into_iter()
        .map(|c| {
            let c = c.unwrap_or_else(|| g.constant(Tensor::zeros(&[batch])));
            g.reshape(c, &[batch, 1])
        })
        .collect::<Result<_>>()?;
    let logits = g.concat(&cols, 1)?;
    Ok(g.softmax(logits))
}

/// Constant `[B, M]` matrix of `1/M`.
pub fn uniform_weights(g: &mut Graph, batch: usize, modalities: usize) -> Var {
    g.constant(Tensor::full(&[batch, modalities], 1.0 / modalities as f64))
}

/// Column `m` of a `[B, M]` weight matrix as a `[B]` vector.
pub fn weight_column(g: &mut Graph, w: Var, m: usize) -> Result<Var> {
    let batch = g.shape(w)[0];
    let col = g.slice(w, 1, m, m + 1)?;
    g.reshape(col, &[batch])
}

/// Scales each `[B, D]` feature by its modality weight (if given), splits it
/// into `k_tok` tokens, and concatenates modalities in order: `[B, M*k_tok, D/k_tok]`.
pub fn tokenize_and_weight(g: &mut Graph, z: &[Var], w: Option<&[Var]>, k_tok: usize) -> Result<Var> {
    let mut blocks = Vec::with_capacity(z.len());
    for (m, &zm) in z.iter().enumerate() {
        let shape = g.shape(zm).to_vec();
        if shape.len() != 2 || !shape[1].is_multiple_of(k_tok) {
            return Err(NumericsError::Shape(format!("cannot split feature {shape:?} into {k_tok} tokens")));
        }
        let scaled = match w {
            Some(w) => g.scale_rows(zm, w[m])?,
            None => zm,
        };
        blocks.push(g.reshape(scaled, &[shape[0], k_tok, shape[1] / k_tok])?);
    }
    g.concat(&blocks, 1)
}

/// Token index to modality map for `m` modalities of `k_tok` tokens each.
pub fn token_modalities(m: usize, k_tok: usize) -> Vec<usize> {
    (0..m).flat_map(|i| std::iter::repeat_n(i, k_tok)).collect()
}

/// How keys and values are projected and scaled.
#[derive(Debug, Clone)]
pub enum KeyValue {
    /// One key and one value projection per modality; tied projections
    /// repeat the same parameter for every modality.
    Decoupled { wk: Vec<ParamId>, wv: Vec<ParamId> },
    /// A single shared projection with constant `1/M` scaling.
    Vanilla { wk: ParamId, wv: ParamId },
}

/// Intermediate values of one attention layer, kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTrace {
    pub keys: Var,
    pub values: Var,
    /// `[B*heads, N, N]` attention probabilities.
    pub probs: Var,
    pub output: Var,
}

#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub wq: ParamId,
    pub kv: KeyValue,
    pub norm_attn: LayerNorm,
    pub norm_ffn: LayerNorm,
    pub ffn: Mlp,
    pub heads: usize,
    pub residual: bool,
}

impl FusionLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, modalities: usize, tied: bool) -> Self {
        let d = cfg.d_model / cfg.tokens_per_modality;
        let wq = store.uniform(format!("{name}.wq"), &[d, d], d);
        let kv = match (cfg.fusion, tied) {
            (FusionKind::Vanilla, _) => {
                KeyValue::Vanilla { wk: store.uniform(format!("{name}.wk"), &[d, d], d), wv: store.uniform(format!("{name}.wv"), &[d, d], d) }
            }
            (FusionKind::Decoupled, true) => {
                let wk = store.uniform(format!("{name}.wk"), &[d, d], d);
                let wv = store.uniform(format!("{name}.wv"), &[d, d], d);
                KeyValue::Decoupled { wk: vec![wk; modalities], wv: vec![wv; modalities] }
            }
            (FusionKind::Decoupled, false) => {
                let wk = (0..modalities).map(|m| store.uniform(format!("{name}.wk{m}"), &[d, d], d)).collect();
                let wv = (0..modalities).map(|m| store.uniform(format!("{name}.wv{m}"), &[d, d], d)).collect();
                KeyValue::Decoupled { wk, wv }
            }
        };
        Self {
            wq,
            kv,
            norm_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            norm_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[d, cfg.ffn_mult * d, d], Activation::Relu),
            heads: cfg.heads,
            residual: cfg.residual,
        }
    }

    /// `[B, N, d] x [d, d]` applied token-wise.
    fn project(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let flat = g.reshape(x, &[shape[0] * shape[1], shape[2]])?;
        let wp = g.param(store, w);
        let y = g.matmul(flat, wp)?;
        g.reshape(y, &shape)
    }

    /// Keys and values for tokens `x: [B, N, d]`. `w[m]` is the `[B]` weight
    /// column of modality `m`, which owns tokens `m*k_tok .. (m+1)*k_tok`.
    pub fn keys_values(&self, g: &mut Graph, store: &ParamStore, x: Var, w: &[Var], k_tok: usize) -> Result<(Var, Var)> {
        match &self.kv {
            KeyValue::Vanilla { wk, wv } => {
                let c = 1.0 / w.len() as f64;
                let k = Self::project(g, store, x, *wk)?;
                let v = Self::project(g, store, x, *wv)?;
                Ok((g.scale(k, c), g.scale(v, c)))
            }
            KeyValue::Decoupled { wk, wv } => {
                let shape = g.shape(x).to_vec();
                let (batch, d) = (shape[0], shape[2]);
                // Tied projections run as one matmul over all tokens so the
                // reduced model accumulates gradients exactly like the vanilla one.
                let tied = wk.iter().all(|&p| p == wk[0]) && wv.iter().all(|&p| p == wv[0]);
                let shared = if tied { Some((Self::project(g, store, x, wk[0])?, Self::project(g, store, x, wv[0])?)) } else { None };
                let mut ks = Vec::with_capacity(w.len());
                let mut vs = Vec::with_capacity(w.len());
                for (m, &wm) in w.iter().enumerate() {
                    let (lo, hi) = (m * k_tok, (m + 1) * k_tok);
                    let (pk, pv) = match shared {
                        Some((k, v)) => (g.slice(k, 1, lo, hi)?, g.slice(v, 1, lo, hi)?),
                        None => {
                            let block = g.slice(x, 1, lo, hi)?;
                            (Self::project(g, store, block, wk[m])?, Self::project(g, store, block, wv[m])?)
                        }
                    };
                    for (p, out) in [(pk, &mut ks), (pv, &mut vs)] {
                        let flat = g.reshape(p, &[batch, k_tok * d])?;
                        let scaled = g.scale_rows(flat, wm)?;
                        out.push(g.reshape(scaled, &[batch, k_tok, d])?);
                    }
                }
                Ok((g.concat(&ks, 1)?, g.concat(&vs, 1)?))
            }
        }
    }

    /// `[B, N, d] -> [B*h, N, d/h]`.
    fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
        if heads == 1 {
            return Ok(x);
        }
        let s = g.shape(x).to_vec();
        let dh = s[2] / heads;
        let r = g.reshape(x, &[s[0], s[1], heads, dh])?;
        let p = g.permute(r, &[0, 2, 1, 3])?;
        g.reshape(p, &[s[0] * heads, s[1], dh])
    }

    fn merge_heads(g: &mut Graph, x: Var, batch: usize, heads: usize) -> Result<Var> {
        if heads == 1 {
            return Ok(x);
        }
        let s = g.shape(x).to_vec();
        let r = g.reshape(x, &[batch, heads, s[1], s[2]])?;
        let p = g.permute(r, &[0, 2, 1, 3])?;
        g.reshape(p, &[batch, s[1], heads * s[2]])
    }

    /// Scaled dot-product attention over already-normalized tokens.
    pub fn attention(&self, g: &mut Graph, store: &ParamStore, x: Var, w: &[Var], k_tok: usize) -> Result<AttentionTrace> {
        let batch = g.shape(x)[0];
        let q = Self::project(g, store, x, self.wq)?;
        let (keys, values) = self.keys_values(g, store, x, w, k_tok)?;
        let qh = Self::split_heads(g, q, self.heads)?;
        let kh = Self::split_heads(g, keys, self.heads)?;
        let vh = Self::split_heads(g, values, self.heads)?;
        let dh = g.shape(qh)[2];
        let kt = g.transpose(kh)?;
        let scores = g.batch_matmul(qh, kt)?;
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = g.softmax(scaled);
        let mixed = g.batch_matmul(probs, vh)?;
        let output = Self::merge_heads(g, mixed, batch, self.heads)?;
        Ok(AttentionTrace { keys, values, probs, output })
    }

    fn feed_forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
        let y = self.ffn.forward(g, store, flat)?;
        g.reshape(y, &s)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var, w: &[Var], k_tok: usize) -> Result<(Var, AttentionTrace)> {
        if self.residual {
            let x = self.norm_attn.forward(g, store, h)?;
            let trace = self.attention(g, store, x, w, k_tok)?;
            let h1 = g.add(h, trace.output)?;
            let x1 = self.norm_ffn.forward(g, store, h1)?;
            let f = self.feed_forward(g, store, x1)?;
            Ok((g.add(h1, f)?, trace))
        } else {
            let trace = self.attention(g, store, h, w, k_tok)?;
            let f = self.feed_forward(g, store, trace.output)?;
            Ok((self.norm_ffn.forward(g, store, f)?, trace))
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionStack {
    pub layers: Vec<FusionLayer>,
    /// Applied to the output of a residual stack.
    pub final_norm: LayerNorm,
    pub tokens_per_modality: usize,
    pub residual: bool,
}

impl FusionStack {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, modalities: usize, tied: bool) -> Self {
        let layers = (0..cfg.layers).map(|l| FusionLayer::new(store, &format!("fusion.{l}"), cfg, modalities, tied)).collect();
        let d = cfg.d_model / cfg.tokens_per_modality;
        Self { layers, final_norm: LayerNorm::new(store, "fusion.ln_out", d), tokens_per_modality: cfg.tokens_per_modality, residual: cfg.residual }
    }

    /// Runs every layer on `h0: [B, N, d]`; returns `H_L` and per-layer traces.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h0: Var, w: &[Var]) -> Result<(Var, Vec<AttentionTrace>)> {
        let mut h = h0;
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, trace) = layer.forward(g, store, h, w, self.tokens_per_modality)?;
            h = next;
            traces.push(trace);
        }
        if self.residual {
            h = self.final_norm.forward(g, store, h)?;
        }
        Ok((h, traces))
    }
}
