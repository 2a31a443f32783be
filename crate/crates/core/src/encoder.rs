//! Stacked post-norm Transformer encoder.
//!
//! Each layer projects its input to Q, K, V with full-width matrices, then
//! each head applies its own `d_model × d_head` projection before scaled
//! dot-product attention. Heads are concatenated and mapped back by `W_O`,
//! followed by residual + layer norm, a ReLU feed-forward block, and a second
//! residual + layer norm.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenSequence, FIRST_MERGE_ID};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
}

impl EncoderConfig {
    /// L=2, h=2, d_m=32, dff=128, max length 64.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 32,
            d_ff: 128,
            max_len: 64,
            vocab_size,
            dropout: 0.1,
            attention_dropout: 0.1,
        }
    }

    /// L=12, h=12, d_m=768, dff=3072, max length 512.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            layers: 12,
            heads: 12,
            d_model: 768,
            d_ff: 3072,
            max_len: 512,
            vocab_size,
            dropout: 0.1,
            attention_dropout: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if self.max_len < 3 {
            return fail(format!("max_len {} < 3", self.max_len));
        }
        if self.vocab_size < FIRST_MERGE_ID as usize {
            return fail(format!(
                "vocab_size {} smaller than the byte alphabet plus specials",
                self.vocab_size
            ));
        }
        for (name, r) in [
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return fail(format!("{name} {r} not in [0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub head_q: Vec<Tensor<T>>,
    pub head_k: Vec<Tensor<T>>,
    pub head_v: Vec<Tensor<T>>,
    pub w_o: Tensor<T>,
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub w_1: Tensor<T>,
    pub b_1: Tensor<T>,
    pub w_2: Tensor<T>,
    pub b_2: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
}

/// Learnable tensors of the encoder. Embedding tables are stored one row per
/// token (resp. position): `[vocab_size, d_model]` and `[max_len, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub token_embedding: Tensor<T>,
    pub position_embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> LayerParams<T> {
    fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, std: f64, rng: &mut R) -> Self {
        let (d, dk, dff) = (cfg.d_model, cfg.head_dim(), cfg.d_ff);
        let mut w = |shape: &[usize]| Tensor::randn(shape, std, rng);
        let w_q = w(&[d, d]);
        let w_k = w(&[d, d]);
        let w_v = w(&[d, d]);
        let head_q = (0..cfg.heads).map(|_| w(&[d, dk])).collect();
        let head_k = (0..cfg.heads).map(|_| w(&[d, dk])).collect();
        let head_v = (0..cfg.heads).map(|_| w(&[d, dk])).collect();
        let w_o = w(&[cfg.heads * dk, d]);
        let w_1 = w(&[d, dff]);
        let w_2 = w(&[dff, d]);
        Self {
            w_q,
            w_k,
            w_v,
            head_q,
            head_k,
            head_v,
            w_o,
            ln1_gain: Tensor::full(&[d], T::one()),
            ln1_bias: Tensor::zeros(&[d]),
            w_1,
            b_1: Tensor::zeros(&[dff]),
            w_2,
            b_2: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], T::one()),
            ln2_bias: Tensor::zeros(&[d]),
        }
    }

    fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            (format!("{prefix}.w_q"), &self.w_q),
            (format!("{prefix}.w_k"), &self.w_k),
            (format!("{prefix}.w_v"), &self.w_v),
        ];
        for (kind, heads) in [
            ("q", &self.head_q),
            ("k", &self.head_k),
            ("v", &self.head_v),
        ] {
            for (h, t) in heads.iter().enumerate() {
                out.push((format!("{prefix}.head{h}.w_{kind}"), t));
            }
        }
        out.extend([
            (format!("{prefix}.w_o"), &self.w_o),
            (format!("{prefix}.ln1.gain"), &self.ln1_gain),
            (format!("{prefix}.ln1.bias"), &self.ln1_bias),
            (format!("{prefix}.ffn.w_1"), &self.w_1),
            (format!("{prefix}.ffn.b_1"), &self.b_1),
            (format!("{prefix}.ffn.w_2"), &self.w_2),
            (format!("{prefix}.ffn.b_2"), &self.b_2),
            (format!("{prefix}.ln2.gain"), &self.ln2_gain),
            (format!("{prefix}.ln2.bias"), &self.ln2_bias),
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.w_q, &mut self.w_k, &mut self.w_v];
        out.extend(self.head_q.iter_mut());
        out.extend(self.head_k.iter_mut());
        out.extend(self.head_v.iter_mut());
        out.extend([
            &mut self.w_o,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_1,
            &mut self.b_1,
            &mut self.w_2,
            &mut self.b_2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]);
        out
    }
}

impl<T: Scalar> EncoderParams<T> {
    /// Weights ~ N(0, 0.02²), biases 0, layer-norm gains 1.
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        Self::init_with_std(cfg, INIT_STD, rng)
    }

    pub fn init_with_std<R: Rng + ?Sized>(
        cfg: &EncoderConfig,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let token_embedding = Tensor::randn(&[cfg.vocab_size, cfg.d_model], std, rng);
        let position_embedding = Tensor::randn(&[cfg.max_len, cfg.d_model], std, rng);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams::init(cfg, std, rng))
            .collect();
        Ok(Self {
            token_embedding,
            position_embedding,
            layers,
        })
    }

    /// Stable names in a fixed order; `tensors_mut` yields the same order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("encoder.token_embedding".to_string(), &self.token_embedding),
            (
                "encoder.position_embedding".to_string(),
                &self.position_embedding,
            ),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named(&format!("encoder.layer{i}")));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    w_q: l.w_q.cast(),
                    w_k: l.w_k.cast(),
                    w_v: l.w_v.cast(),
                    head_q: l.head_q.iter().map(Tensor::cast).collect(),
                    head_k: l.head_k.iter().map(Tensor::cast).collect(),
                    head_v: l.head_v.iter().map(Tensor::cast).collect(),
                    w_o: l.w_o.cast(),
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    w_1: l.w_1.cast(),
                    b_1: l.b_1.cast(),
                    w_2: l.w_2.cast(),
                    b_2: l.b_2.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                })
                .collect(),
        }
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> EncoderVars {
        let mut p = |t: &Tensor<T>| g.param(t.clone());
        EncoderVars {
            token_embedding: p(&self.token_embedding),
            position_embedding: p(&self.position_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    w_q: p(&l.w_q),
                    w_k: p(&l.w_k),
                    w_v: p(&l.w_v),
                    head_q: l.head_q.iter().map(&mut p).collect(),
                    head_k: l.head_k.iter().map(&mut p).collect(),
                    head_v: l.head_v.iter().map(&mut p).collect(),
                    w_o: p(&l.w_o),
                    ln1_gain: p(&l.ln1_gain),
                    ln1_bias: p(&l.ln1_bias),
                    w_1: p(&l.w_1),
                    b_1: p(&l.b_1),
                    w_2: p(&l.w_2),
                    b_2: p(&l.b_2),
                    ln2_gain: p(&l.ln2_gain),
                    ln2_bias: p(&l.ln2_bias),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub head_q: Vec<Var>,
    pub head_k: Vec<Var>,
    pub head_v: Vec<Var>,
    pub w_o: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub w_1: Var,
    pub b_1: Var,
    pub w_2: Var,
    pub b_2: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

impl LayerVars {
    fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.w_q, self.w_k, self.w_v];
        out.extend(&self.head_q);
        out.extend(&self.head_k);
        out.extend(&self.head_v);
        out.extend([
            self.w_o,
            self.ln1_gain,
            self.ln1_bias,
            self.w_1,
            self.b_1,
            self.w_2,
            self.b_2,
            self.ln2_gain,
            self.ln2_bias,
        ]);
        out
    }
}

/// Graph handles for [`EncoderParams`], in `named_tensors` order.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub layers: Vec<LayerVars>,
}

impl EncoderVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding, self.position_embedding];
        for l in &self.layers {
            out.extend(l.vars());
        }
        out
    }

    /// Inverse of [`EncoderVars::vars`], e.g. for the inputs of a gradient
    /// check.
    pub fn from_flat(cfg: &EncoderConfig, flat: &[Var]) -> Result<Self> {
        let h = cfg.heads;
        let per_layer = 3 + 3 * h + 9;
        if flat.len() != 2 + cfg.layers * per_layer {
            return Err(Error::invalid(format!(
                "expected {} encoder tensors, got {}",
                2 + cfg.layers * per_layer,
                flat.len()
            )));
        }
        let layers = flat[2..]
            .chunks(per_layer)
            .map(|c| {
                let r = &c[3 + 3 * h..];
                LayerVars {
                    w_q: c[0],
                    w_k: c[1],
                    w_v: c[2],
                    head_q: c[3..3 + h].to_vec(),
                    head_k: c[3 + h..3 + 2 * h].to_vec(),
                    head_v: c[3 + 2 * h..3 + 3 * h].to_vec(),
                    w_o: r[0],
                    ln1_gain: r[1],
                    ln1_bias: r[2],
                    w_1: r[3],
                    b_1: r[4],
                    w_2: r[5],
                    b_2: r[6],
                    ln2_gain: r[7],
                    ln2_bias: r[8],
                }
            })
            .collect();
        Ok(Self {
            token_embedding: flat[0],
            position_embedding: flat[1],
            layers,
        })
    }
}

/// Dropout is active only in `Train`.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

impl Mode<'_> {
    fn dropout<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var, rate: f64) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => g.dropout(x, rate, &mut **rng),
        }
    }
}

/// Token embedding plus learned position embedding, one row per position.
pub fn embed<T: Scalar>(
    g: &mut Graph<T>,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
    ids: &[u32],
) -> Result<Var> {
    if ids.len() > cfg.max_len {
        return Err(Error::invalid(format!(
            "sequence length {} exceeds max_len {}",
            ids.len(),
            cfg.max_len
        )));
    }
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let tok = g.embedding(vars.token_embedding, &idx)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = g.embedding(vars.position_embedding, &positions)?;
    g.add(tok, pos)
}

/// `softmax(Q·Kᵀ/√d_k)·V` with pad keys excluded. `q`, `k`, `v` are
/// `[len, d_k]`.
pub fn attention_head<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    attend: &[bool],
    attention_dropout: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let (qs, ks, vs) = (g.value(q).shape(), g.value(k).shape(), g.value(v).shape());
    if qs.len() != 2 || qs != ks || ks[0] != vs[0] {
        return Err(Error::Shape {
            op: "attention_head",
            left: qs.to_vec(),
            right: ks.to_vec(),
        });
    }
    let dk = qs[1];
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::one() / T::of_f64(dk as f64).sqrt());
    let weights = g.softmax_masked(scores, Some(attend))?;
    let weights = mode.dropout(g, weights, attention_dropout)?;
    g.matmul(weights, v)
}

/// Concatenated heads projected by `W_O`.
pub fn multi_head<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    layer: &LayerVars,
    attend: &[bool],
    attention_dropout: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let q = g.matmul(x, layer.w_q)?;
    let k = g.matmul(x, layer.w_k)?;
    let v = g.matmul(x, layer.w_v)?;
    let mut heads = Vec::with_capacity(layer.head_q.len());
    for h in 0..layer.head_q.len() {
        let qh = g.matmul(q, layer.head_q[h])?;
        let kh = g.matmul(k, layer.head_k[h])?;
        let vh = g.matmul(v, layer.head_v[h])?;
        heads.push(attention_head(
            g,
            qh,
            kh,
            vh,
            attend,
            attention_dropout,
            mode,
        )?);
    }
    let cat = g.concat_cols(&heads)?;
    g.matmul(cat, layer.w_o)
}

/// `O = LN(x + MHSA(x))`, then `LN(O + ReLU(O·W₁ + b₁)·W₂ + b₂)`.
pub fn encoder_layer<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    layer: &LayerVars,
    cfg: &EncoderConfig,
    attend: &[bool],
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let eps = T::of_f64(LAYER_NORM_EPS);
    let attn = multi_head(g, x, layer, attend, cfg.attention_dropout, mode)?;
    let attn = mode.dropout(g, attn, cfg.dropout)?;
    let res = g.add(x, attn)?;
    let o = g.layer_norm(res, layer.ln1_gain, layer.ln1_bias, eps)?;

    let h = g.matmul(o, layer.w_1)?;
    let h = g.add_row(h, layer.b_1)?;
    let h = g.relu(h);
    let f = g.matmul(h, layer.w_2)?;
    let f = g.add_row(f, layer.b_2)?;
    let f = mode.dropout(g, f, cfg.dropout)?;
    let res = g.add(o, f)?;
    g.layer_norm(res, layer.ln2_gain, layer.ln2_bias, eps)
}

/// Contextual vectors `[len, d_model]` for a framed sequence.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
    seq: &TokenSequence,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    if seq.ids.len() != seq.attention_mask.len() {
        return Err(Error::invalid(
            "token sequence and attention mask differ in length",
        ));
    }
    if let Some(&bad) = seq.ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
        return Err(Error::invalid(format!(
            "token id {bad} out of range for vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let mut x = embed(g, vars, cfg, &seq.ids)?;
    for layer in &vars.layers {
        x = encoder_layer(g, x, layer, cfg, &seq.attention_mask, mode)?;
    }
    Ok(x)
}

/// Eval-mode forward pass outside any training graph.
pub fn encode_eval<T: Scalar>(
    params: &EncoderParams<T>,
    cfg: &EncoderConfig,
    seq: &TokenSequence,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let out = encode(&mut g, &vars, cfg, seq, &mut Mode::Eval)?;
    Ok(g.value(out).clone())
}
