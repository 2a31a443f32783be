//! Contrastive pre-training: a report and an augmented copy form a positive
//! pair; the other positives in the batch act as negatives.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{lr_schedule, AdamWConfig, Graph, Scalar, Tensor, Var};
use crate::classifier::mean_pool;
use crate::encoder::{encode, EncoderConfig, EncoderVars, Mode};
use crate::error::{Error, Result};
use crate::model::{epoch_batches, total_steps, Model, ParamGroup, Trainer};
use crate::tokenizer::{self, frame_unpadded, TokenSequence, Vocabulary, MASK};

pub const DEFAULT_TAU: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMethod {
    /// Exchange two distinct whitespace-delimited words.
    Swap,
    /// Remove one whitespace-delimited word.
    Delete,
    /// Replace one content token with MASK.
    Mask,
}

impl AugmentMethod {
    pub const ALL: [AugmentMethod; 3] = [
        AugmentMethod::Mask,
        AugmentMethod::Delete,
        AugmentMethod::Swap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentMethod::Swap => "swap",
            AugmentMethod::Delete => "delete",
            AugmentMethod::Mask => "mask",
        }
    }
}

impl fmt::Display for AugmentMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugmentMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "swap" => Ok(AugmentMethod::Swap),
            "delete" => Ok(AugmentMethod::Delete),
            "mask" => Ok(AugmentMethod::Mask),
            other => Err(Error::Config(format!(
                "unknown augmentation method {other:?} (expected swap, delete or mask)"
            ))),
        }
    }
}

/// Word-level augmentation of raw text. Words are whitespace-delimited and
/// re-joined with single spaces.
pub fn augment_text<R: Rng + ?Sized>(
    text: &str,
    method: AugmentMethod,
    rng: &mut R,
) -> Result<String> {
    let mut words: Vec<&str> = text.split_whitespace().collect();
    match method {
        AugmentMethod::Mask => {
            return Err(Error::invalid("mask augmentation operates on token ids"));
        }
        _ if words.len() < 2 => {
            return Err(Error::invalid(format!(
                "{method} augmentation needs at least 2 words, got {}",
                words.len()
            )));
        }
        AugmentMethod::Swap => {
            let pick = sample(rng, words.len(), 2);
            words.swap(pick.index(0), pick.index(1));
        }
        AugmentMethod::Delete => {
            let i = rng.random_range(0..words.len());
            words.remove(i);
        }
    }
    Ok(words.join(" "))
}

/// Replaces one uniformly chosen content token with MASK.
pub fn mask_one_token<R: Rng + ?Sized>(seq: &TokenSequence, rng: &mut R) -> Result<TokenSequence> {
    let range = seq.content_positions();
    if range.is_empty() {
        return Err(Error::invalid(
            "mask augmentation needs at least 1 content token",
        ));
    }
    let mut out = seq.clone();
    out.ids[rng.random_range(range)] = MASK;
    Ok(out)
}

/// Whether `text` satisfies the method's precondition.
pub fn can_augment(text: &str, method: AugmentMethod, vocab: &Vocabulary) -> bool {
    match method {
        AugmentMethod::Swap | AugmentMethod::Delete => text.split_whitespace().nth(1).is_some(),
        AugmentMethod::Mask => !tokenizer::encode(text, vocab).is_empty(),
    }
}

/// `(s, s⁺)` for one report.
pub fn make_pair<R: Rng + ?Sized>(
    text: &str,
    original: &TokenSequence,
    method: AugmentMethod,
    vocab: &Vocabulary,
    max_len: usize,
    rng: &mut R,
) -> Result<(TokenSequence, TokenSequence)> {
    let positive = match method {
        AugmentMethod::Mask => mask_one_token(original, rng)?,
        _ => {
            let t = augment_text(text, method, rng)?;
            frame_unpadded(&tokenizer::encode(&t, vocab), max_len)?
        }
    };
    Ok((original.clone(), positive))
}

/// Mean-pooled encoder output, `[1, d_model]`.
pub fn represent<T: Scalar>(
    g: &mut Graph<T>,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
    seq: &TokenSequence,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let h = encode(g, vars, cfg, seq, mode)?;
    mean_pool(g, h, &seq.attention_mask)
}

/// `mean_i −log(exp(sim(rᵢ,rᵢ⁺)/τ) / Σⱼ exp(sim(rᵢ,rⱼ⁺)/τ))` with cosine
/// similarity. `anchors` and `positives` are `[N, d]`.
pub fn cl_loss<T: Scalar>(g: &mut Graph<T>, anchors: Var, positives: Var, tau: f64) -> Result<Var> {
    Ok(cl_loss_parts(g, anchors, positives, tau)?.0)
}

/// Loss plus the `[N, N]` cosine-similarity matrix.
fn cl_loss_parts<T: Scalar>(
    g: &mut Graph<T>,
    anchors: Var,
    positives: Var,
    tau: f64,
) -> Result<(Var, Var)> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let (a, p) = (g.value(anchors).shape(), g.value(positives).shape());
    if a != p || a.len() != 2 {
        return Err(Error::Shape {
            op: "cl_loss",
            left: a.to_vec(),
            right: p.to_vec(),
        });
    }
    let n = a[0];
    let a = g.normalize_rows(anchors)?;
    let p = g.normalize_rows(positives)?;
    let pt = g.transpose(p)?;
    let sim = g.matmul(a, pt)?;
    let logits = g.scale(sim, T::of_f64(1.0 / tau));
    let targets: Vec<Option<usize>> = (0..n).map(Some).collect();
    Ok((g.cross_entropy(logits, &targets)?, sim))
}

/// [`cl_loss`] evaluated on plain vectors.
pub fn cl_loss_pairs(pairs: &[(Vec<f64>, Vec<f64>)], tau: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("cl_loss: empty batch"));
    }
    let (a, p): (Vec<Vec<f64>>, Vec<Vec<f64>>) = pairs.iter().cloned().unzip();
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_rows(&a)?);
    let p = g.constant(Tensor::from_rows(&p)?);
    let loss = cl_loss(&mut g, a, p, tau)?;
    Ok(g.value(loss).data()[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClParams {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub warmup_steps: u64,
    pub max_steps: Option<u64>,
    pub tau: f64,
    pub method: AugmentMethod,
    pub max_len: usize,
    pub adamw: AdamWConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClStepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Mean cosine similarity of each anchor with its own positive.
    pub alignment: f64,
    /// `log mean exp(−2‖u−v‖²)` over distinct anchor pairs; diagnostic only.
    pub uniformity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClOutcome {
    pub log: Vec<ClStepLog>,
    /// Reports too short for the augmentation method.
    pub skipped: usize,
}

fn uniformity(unit: &Tensor<f64>) -> Option<f64> {
    let n = unit.rows();
    if n < 2 {
        return None;
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let cos: f64 = unit
                .row(i)
                .iter()
                .zip(unit.row(j))
                .map(|(a, b)| a * b)
                .sum();
            acc += (-2.0 * (2.0 - 2.0 * cos)).exp();
            count += 1;
        }
    }
    Some((acc / count as f64).ln())
}

/// Label-free contrastive training of the encoder. Dropout is active for
/// both members of every pair.
pub fn pretrain_cl<R: Rng>(
    model: &mut Model<f32>,
    texts: &[String],
    vocab: &Vocabulary,
    params: &ClParams,
    rng: &mut R,
    on_step: &mut dyn FnMut(&ClStepLog),
) -> Result<ClOutcome> {
    if params.batch_size == 0 {
        return Err(Error::Config("cl: batch size must be positive".into()));
    }
    if params.max_len > model.config.max_len {
        return Err(Error::Config(format!(
            "cl: max_len {} exceeds encoder max_len {}",
            params.max_len, model.config.max_len
        )));
    }
    let eligible: Vec<(&str, TokenSequence)> = texts
        .iter()
        .filter(|t| can_augment(t, params.method, vocab))
        .map(|t| {
            Ok((
                t.as_str(),
                frame_unpadded(&tokenizer::encode(t, vocab), params.max_len)?,
            ))
        })
        .collect::<Result<_>>()?;
    let skipped = texts.len() - eligible.len();
    if skipped > 0 {
        log::info!(
            "contrastive: skipped {skipped} reports too short for {} augmentation",
            params.method
        );
    }
    if eligible.is_empty() {
        return Err(Error::invalid("pretrain_cl: no report can be augmented"));
    }
    let total = total_steps(
        eligible.len(),
        params.batch_size,
        params.epochs,
        params.max_steps,
    );
    let mut trainer = Trainer::new(model, ParamGroup::Contrastive, params.adamw);
    let mut log = Vec::with_capacity(total as usize);
    'outer: loop {
        for idx in epoch_batches(eligible.len(), params.batch_size, rng) {
            let step = trainer.steps_taken() + 1;
            if step > total {
                break 'outer;
            }
            let lr = lr_schedule(step, params.warmup_steps, total, params.lr)?;
            let pairs: Vec<(TokenSequence, TokenSequence)> = idx
                .iter()
                .map(|&i| {
                    let (text, seq) = &eligible[i];
                    make_pair(text, seq, params.method, vocab, params.max_len, rng)
                })
                .collect::<Result<_>>()?;
            let cfg = model.config;
            let (loss, (alignment, unif)) = trainer.step(model, lr, |g, vars| {
                let mut mode = Mode::Train(&mut *rng);
                let mut a = Vec::with_capacity(pairs.len());
                let mut p = Vec::with_capacity(pairs.len());
                for (s, s_pos) in &pairs {
                    a.push(represent(g, &vars.encoder, &cfg, s, &mut mode)?);
                    p.push(represent(g, &vars.encoder, &cfg, s_pos, &mut mode)?);
                }
                let a = g.concat_rows(&a)?;
                let p = g.concat_rows(&p)?;
                let (loss, sim) = cl_loss_parts(g, a, p, params.tau)?;
                let s = g.value(sim);
                let n = s.rows();
                let alignment = (0..n).map(|i| s.get(i, i).as_f64()).sum::<f64>() / n as f64;
                let unit: Tensor<f64> = {
                    let t = g.value(a).cast::<f64>();
                    let rows: Vec<Vec<f64>> = (0..t.rows())
                        .map(|i| {
                            let r = t.row(i);
                            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                            r.iter().map(|v| v / norm).collect()
                        })
                        .collect();
                    Tensor::from_rows(&rows)?
                };
                Ok((loss, (alignment, uniformity(&unit))))
            })?;
            let entry = ClStepLog {
                step,
                lr,
                loss,
                alignment,
                uniformity: unif,
            };
            on_step(&entry);
            log.push(entry);
        }
    }
    Ok(ClOutcome { log, skipped })
}
