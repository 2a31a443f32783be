//! Masked-language-model pre-training with dynamic masking.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{lr_schedule, AdamWConfig, Graph, Scalar, Var};
use crate::encoder::{encode, EncoderConfig, Mode};
use crate::error::{Error, Result};
use crate::model::{epoch_batches, total_steps, Model, ModelVars, ParamGroup, Trainer};
use crate::tokenizer::{TokenId, TokenSequence, CLS, FIRST_MERGE_ID, MASK};

pub const DEFAULT_MASK_RATE: f64 = 0.15;
pub const DEFAULT_VARIANTS: usize = 10;

/// What happened to a selected position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Replacement {
    Mask,
    Random,
    Keep,
}

/// One dynamically masked copy of a sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input: TokenSequence,
    /// Original id at masked positions, `None` (ignored) elsewhere.
    pub targets: Vec<Option<TokenId>>,
    /// Masked positions in increasing order.
    pub positions: Vec<usize>,
    pub replacements: Vec<Replacement>,
}

/// `max(1, round(rate · n))`, never more than `n`.
pub fn mask_count(content_len: usize, rate: f64) -> usize {
    ((rate * content_len as f64).round() as usize)
        .max(1)
        .min(content_len)
}

/// Uniform over non-special ids `0..vocab_size`.
fn random_regular<R: Rng + ?Sized>(vocab_size: usize, rng: &mut R) -> TokenId {
    let specials = FIRST_MERGE_ID - CLS;
    let r = rng.random_range(0..vocab_size as TokenId - specials);
    if r >= CLS {
        r + specials
    } else {
        r
    }
}

/// Selects `mask_count` content positions without replacement; each becomes
/// MASK (80%), a random regular token (10%) or stays as is (10%).
pub fn dynamic_mask<R: Rng + ?Sized>(
    seq: &TokenSequence,
    vocab_size: usize,
    rate: f64,
    rng: &mut R,
) -> Result<MaskedSequence> {
    let n = seq.content_len();
    if n == 0 {
        return Err(Error::invalid(
            "dynamic_mask: sequence has no content tokens",
        ));
    }
    if vocab_size <= FIRST_MERGE_ID as usize {
        return Err(Error::invalid(format!(
            "dynamic_mask: vocab size {vocab_size} too small"
        )));
    }
    let k = mask_count(n, rate);
    let mut positions: Vec<usize> = sample(rng, n, k).into_iter().map(|i| i + 1).collect();
    positions.sort_unstable();
    let mut input = seq.clone();
    let mut targets = vec![None; seq.ids.len()];
    let mut replacements = Vec::with_capacity(k);
    for &p in &positions {
        targets[p] = Some(seq.ids[p]);
        let u: f64 = rng.random();
        let r = if u < 0.8 {
            input.ids[p] = MASK;
            Replacement::Mask
        } else if u < 0.9 {
            input.ids[p] = random_regular(vocab_size, rng);
            Replacement::Random
        } else {
            Replacement::Keep
        };
        replacements.push(r);
    }
    Ok(MaskedSequence {
        input,
        targets,
        positions,
        replacements,
    })
}

/// `k` independent masked copies of the same sequence.
pub fn expand_variants<R: Rng + ?Sized>(
    seq: &TokenSequence,
    k: usize,
    vocab_size: usize,
    rate: f64,
    rng: &mut R,
) -> Result<Vec<MaskedSequence>> {
    if k == 0 {
        return Err(Error::invalid("expand_variants: k must be at least 1"));
    }
    (0..k)
        .map(|_| dynamic_mask(seq, vocab_size, rate, rng))
        .collect()
}

/// Vocabulary logits through the tied embedding: `H·ℰᵀ + b`.
pub fn mlm_logits<T: Scalar>(g: &mut Graph<T>, hidden: Var, vars: &ModelVars) -> Result<Var> {
    let et = g.transpose(vars.encoder.token_embedding)?;
    let logits = g.matmul(hidden, et)?;
    g.add_row(logits, vars.mlm_bias)
}

/// Mean negative log-likelihood over positions with a target.
pub fn mlm_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[Option<TokenId>],
) -> Result<Var> {
    let t: Vec<Option<usize>> = targets.iter().map(|t| t.map(|v| v as usize)).collect();
    if t.iter().all(Option::is_none) {
        return Err(Error::invalid("mlm_loss: no masked position"));
    }
    g.cross_entropy(logits, &t)
}

/// Loss over a batch: only the hidden rows at masked positions are projected
/// onto the vocabulary.
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    cfg: &EncoderConfig,
    batch: &[MaskedSequence],
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for m in batch {
        let h = encode(g, &vars.encoder, cfg, &m.input, mode)?;
        rows.push(g.embedding(h, &m.positions)?);
        targets.extend(m.positions.iter().map(|&p| m.targets[p]));
    }
    let gathered = g.concat_rows(&rows)?;
    let logits = mlm_logits(g, gathered, vars)?;
    mlm_loss(g, logits, &targets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmParams {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub warmup_steps: u64,
    pub max_steps: Option<u64>,
    pub mask_rate: f64,
    pub variants: usize,
    pub adamw: AdamWConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Trains the encoder and tied MLM head. Each epoch visits every sequence
/// `variants` times, each visit with a fresh mask (the expansion is never
/// materialized). Sequences without content are dropped.
pub fn pretrain_mlm<R: Rng>(
    model: &mut Model<f32>,
    sequences: &[TokenSequence],
    params: &MlmParams,
    rng: &mut R,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    if params.batch_size == 0 || params.variants == 0 {
        return Err(Error::Config(
            "mlm: batch size and variants must be positive".into(),
        ));
    }
    let usable: Vec<&TokenSequence> = sequences.iter().filter(|s| s.content_len() > 0).collect();
    if usable.is_empty() {
        return Err(Error::invalid(
            "pretrain_mlm: corpus has no usable sequence",
        ));
    }
    let n = usable.len() * params.variants;
    let total = total_steps(n, params.batch_size, params.epochs, params.max_steps);
    let vocab = model.config.vocab_size;
    let mut trainer = Trainer::new(model, ParamGroup::Mlm, params.adamw);
    let mut log = Vec::with_capacity(total as usize);
    'outer: loop {
        for idx in epoch_batches(n, params.batch_size, rng) {
            let step = trainer.steps_taken() + 1;
            if step > total {
                break 'outer;
            }
            let lr = lr_schedule(step, params.warmup_steps, total, params.lr)?;
            let batch: Vec<MaskedSequence> = idx
                .iter()
                .map(|&i| dynamic_mask(usable[i / params.variants], vocab, params.mask_rate, rng))
                .collect::<Result<_>>()?;
            let cfg = model.config;
            let (loss, ()) = trainer.step(model, lr, |g, vars| {
                let mut mode = Mode::Train(&mut *rng);
                Ok((batch_loss(g, vars, &cfg, &batch, &mut mode)?, ()))
            })?;
            let entry = StepLog { step, lr, loss };
            on_step(&entry);
            log.push(entry);
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Tensor;
    use crate::encoder::EncoderConfig;
    use crate::tokenizer::{frame, is_special, CLS, EOS};

    fn seq(n: usize, max_len: usize) -> TokenSequence {
        let ids: Vec<TokenId> = (0..n as TokenId).map(|i| 300 + i).collect();
        frame(&ids, max_len).unwrap()
    }

    #[test]
    fn mask_counts_follow_rounding_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            dynamic_mask(&seq(20, 30), 400, 0.15, &mut rng)
                .unwrap()
                .positions
                .len(),
            3
        );
        assert_eq!(
            dynamic_mask(&seq(4, 30), 400, 0.15, &mut rng)
                .unwrap()
                .positions
                .len(),
            1
        );
        assert_eq!(mask_count(1, 0.15), 1);
        assert_eq!(mask_count(10, 0.15), 2); // round(1.5) rounds half away from zero
        assert!(dynamic_mask(&seq(0, 30), 400, 0.15, &mut rng).is_err());
    }

    #[test]
    fn masks_never_touch_specials_or_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..40 {
            let s = seq(n, 48);
            for _ in 0..20 {
                let m = dynamic_mask(&s, 400, 0.15, &mut rng).unwrap();
                for &p in &m.positions {
                    assert!(s.content_positions().contains(&p));
                    assert!(!is_special(m.targets[p].unwrap()));
                }
                for (p, t) in m.targets.iter().enumerate() {
                    assert_eq!(t.is_some(), m.positions.contains(&p));
                }
                assert_eq!(m.input.ids[0], CLS);
                assert_eq!(m.input.ids[s.length - 1], EOS);
                assert_eq!(m.input.ids[s.length..], s.ids[s.length..]);
                for (&p, r) in m.positions.iter().zip(&m.replacements) {
                    match r {
                        Replacement::Mask => assert_eq!(m.input.ids[p], MASK),
                        Replacement::Keep => assert_eq!(m.input.ids[p], s.ids[p]),
                        Replacement::Random => assert!(!is_special(m.input.ids[p])),
                    }
                }
            }
        }
    }

    #[test]
    fn random_replacements_cover_regular_ids_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..20_000 {
            let id = random_regular(262, &mut rng);
            assert!(!is_special(id) && (id as usize) < 262);
            seen.insert(id);
        }
        assert_eq!(seen.len(), 258);
    }

    #[test]
    fn variants_are_fresh_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = seq(50, 64);
        let v = expand_variants(&s, 10, 500, 0.15, &mut rng).unwrap();
        assert_eq!(v.len(), 10);
        let distinct: std::collections::HashSet<Vec<TokenId>> =
            v.iter().map(|m| m.input.ids.clone()).collect();
        assert!(distinct.len() >= 9);
        assert_eq!(
            expand_variants(&s, 1, 500, 0.15, &mut rng).unwrap().len(),
            1
        );
        assert!(expand_variants(&s, 0, 500, 0.15, &mut rng).is_err());
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[4, 300]));
        let loss = mlm_loss(&mut g, logits, &[None, Some(5), Some(299), None]).unwrap();
        assert!((g.value(loss).data()[0] - 300f64.ln()).abs() < 1e-12);
        assert!((300f64.ln() - 5.7038).abs() < 1e-4);
        assert!(mlm_loss(&mut g, logits, &[None; 4]).is_err());
    }

    #[test]
    fn peaked_logits_drive_loss_to_zero() {
        let mut data = vec![0.0f64; 2 * 10];
        data[3] = 60.0;
        data[10 + 7] = 60.0;
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![2, 10], data).unwrap());
        let loss = mlm_loss(&mut g, logits, &[Some(3), Some(7)]).unwrap();
        assert!(g.value(loss).data()[0] < 1e-20);
    }

    #[test]
    fn two_position_case_matches_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t: Tensor<f64> = Tensor::randn(&[3, 6], 1.5, &mut rng);
        let targets = [Some(2), None, Some(5)];
        let mut g = Graph::new();
        let logits = g.constant(t.clone());
        let loss = mlm_loss(&mut g, logits, &targets).unwrap();
        let nll = |r: usize, c: usize| {
            let z: f64 = t.row(r).iter().map(|v| v.exp()).sum();
            -(t.get(r, c).exp() / z).ln()
        };
        let expect = (nll(0, 2) + nll(2, 5)) / 2.0;
        assert!((g.value(loss).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_is_invariant_to_which_positions_are_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t: Tensor<f64> = Tensor::randn(&[2, 8], 1.0, &mut rng);
        let mut padded = vec![0.0; 5 * 8];
        padded[8..16].copy_from_slice(t.row(0));
        padded[32..40].copy_from_slice(t.row(1));
        let mut g = Graph::new();
        let a = g.constant(t);
        let b = g.constant(Tensor::new(vec![5, 8], padded).unwrap());
        let la = mlm_loss(&mut g, a, &[Some(1), Some(4)]).unwrap();
        let lb = mlm_loss(&mut g, b, &[None, Some(1), None, None, Some(4)]).unwrap();
        assert!((g.value(la).data()[0] - g.value(lb).data()[0]).abs() < 1e-12);
    }

    #[test]
    fn gathered_batch_loss_equals_full_logit_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = EncoderConfig {
            dropout: 0.0,
            attention_dropout: 0.0,
            ..EncoderConfig::desk(320)
        };
        let model: Model<f64> = Model::init(cfg, &mut rng).unwrap();
        let m = dynamic_mask(&seq(12, 20), 320, 0.15, &mut rng).unwrap();
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let fast = batch_loss(
            &mut g,
            &vars,
            &cfg,
            std::slice::from_ref(&m),
            &mut Mode::Eval,
        )
        .unwrap();
        let h = encode(&mut g, &vars.encoder, &cfg, &m.input, &mut Mode::Eval).unwrap();
        let logits = mlm_logits(&mut g, h, &vars).unwrap();
        let full = mlm_loss(&mut g, logits, &m.targets).unwrap();
        assert!((g.value(fast).data()[0] - g.value(full).data()[0]).abs() < 1e-10);
    }

    #[test]
    fn pretraining_is_deterministic_and_skips_empty_sequences() {
        let cfg = EncoderConfig::desk(320);
        let seqs = vec![seq(6, 16), seq(0, 16), seq(9, 16)];
        let params = MlmParams {
            batch_size: 2,
            lr: 1e-3,
            epochs: 1,
            warmup_steps: 1,
            max_steps: None,
            mask_rate: 0.15,
            variants: 2,
            adamw: AdamWConfig::default(),
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut model = Model::init(cfg, &mut rng).unwrap();
            let log = pretrain_mlm(&mut model, &seqs, &params, &mut rng, &mut |_| {}).unwrap();
            (model, log)
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(l1, l2);
        assert_eq!(m1, m2);
        // 2 usable sequences × 2 variants, batch 2
        assert_eq!(l1.len(), 2);
        assert_eq!(l1[0].step, 1);
    }
}
