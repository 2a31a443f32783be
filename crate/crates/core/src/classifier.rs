//! Priority classification head, fine-tuning, and evaluation metrics.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{lr_schedule, AdamWConfig, Graph, Scalar, Tensor, Var};
use crate::corpus::{compose_text, word_count, BugReport, Priority};
use crate::encoder::{encode, Mode};
use crate::error::{Error, Result};
use crate::mlm::StepLog;
use crate::model::{
    epoch_batches, total_steps, Model, ModelVars, ParamGroup, Trainer, NUM_CLASSES,
};
use crate::tokenizer::{self, frame_unpadded, TokenSequence, Vocabulary};

pub const DEFAULT_MAX_LEN: usize = 256;

/// Mean over attended rows (CLS and EOS included, PAD excluded): `[1, d]`.
pub fn mean_pool<T: Scalar>(
    g: &mut Graph<T>,
    outputs: Var,
    attention_mask: &[bool],
) -> Result<Var> {
    let rows: Vec<usize> = (0..attention_mask.len())
        .filter(|&i| attention_mask[i])
        .collect();
    if rows.is_empty() {
        return Err(Error::invalid("mean_pool: every position is padding"));
    }
    g.mean_rows(outputs, &rows)
}

/// `softmax(W·O_mp)` as logits `[B, 5]` for pooled rows `[B, d]`.
pub fn class_logits<T: Scalar>(g: &mut Graph<T>, pooled: Var, vars: &ModelVars) -> Result<Var> {
    let wt = g.transpose(vars.classifier)?;
    g.matmul(pooled, wt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorityDistribution {
    pub probs: BTreeMap<Priority, f64>,
}

impl PriorityDistribution {
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.len() != NUM_CLASSES || logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "expected {NUM_CLASSES} finite logits"
            )));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(Self {
            probs: Priority::ALL
                .iter()
                .zip(exps)
                .map(|(&p, e)| (p, e / z))
                .collect(),
        })
    }

    pub fn get(&self, p: Priority) -> f64 {
        self.probs.get(&p).copied().unwrap_or(0.0)
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> Priority {
        argmax_lowest(&Priority::ALL.map(|p| self.get(p))).0
    }
}

/// Index of the maximum, preferring the lowest index, and whether a tie
/// occurred.
fn argmax_lowest(values: &[f64]) -> (Priority, bool) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    let tie = values
        .iter()
        .enumerate()
        .any(|(i, &v)| i != best && v == values[best]);
    (Priority::from_index(best).expect("five classes"), tie)
}

pub fn prepare(report: &BugReport, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    frame_unpadded(&tokenizer::encode(&compose_text(report), vocab), max_len)
}

fn check_max_len(model: &Model<f32>, max_len: usize) -> Result<()> {
    if max_len > model.config.max_len {
        return Err(Error::Config(format!(
            "max_len {max_len} exceeds encoder max_len {}",
            model.config.max_len
        )));
    }
    Ok(())
}

/// Raw class logits for one framed sequence in eval mode.
pub fn logits_for(model: &Model<f32>, seq: &TokenSequence) -> Result<[f64; NUM_CLASSES]> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let h = encode(&mut g, &vars.encoder, &model.config, seq, &mut Mode::Eval)?;
    let pooled = mean_pool(&mut g, h, &seq.attention_mask)?;
    let logits = class_logits(&mut g, pooled, &vars)?;
    let v = g.value(logits).data();
    let mut out = [0.0; NUM_CLASSES];
    for (o, x) in out.iter_mut().zip(v) {
        *o = x.as_f64();
    }
    Ok(out)
}

pub fn predict(
    report: &BugReport,
    model: &Model<f32>,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<PriorityDistribution> {
    check_max_len(model, max_len)?;
    let seq = prepare(report, vocab, max_len)?;
    PriorityDistribution::from_logits(&logits_for(model, &seq)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// No gold instance of this class in the evaluated set.
    pub zero_support: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Rows are gold labels, columns predictions, both in P1..P5 order.
pub type Confusion = [[usize; NUM_CLASSES]; NUM_CLASSES];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub accuracy: f64,
    pub weighted: WeightedMetrics,
    pub per_class: BTreeMap<Priority, ClassMetrics>,
    pub confusion: Confusion,
    pub length_buckets: BTreeMap<String, f64>,
    /// Predictions where the top probability was shared by several classes.
    pub argmax_ties: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and support-weighted precision, recall and F1.
pub fn metrics(gold: &[Priority], pred: &[Priority]) -> Result<EvalReport> {
    if gold.is_empty() {
        return Err(Error::invalid("evaluate: empty test set"));
    }
    if gold.len() != pred.len() {
        return Err(Error::invalid(format!(
            "evaluate: {} gold labels but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    let mut confusion: Confusion = [[0; NUM_CLASSES]; NUM_CLASSES];
    for (g, p) in gold.iter().zip(pred) {
        confusion[g.index()][p.index()] += 1;
    }
    let total = gold.len();
    let correct: usize = (0..NUM_CLASSES).map(|i| confusion[i][i]).sum();
    let mut per_class = BTreeMap::new();
    let mut weighted = WeightedMetrics {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
    for p in Priority::ALL {
        let i = p.index();
        let tp = confusion[i][i];
        let support: usize = confusion[i].iter().sum();
        let predicted: usize = (0..NUM_CLASSES).map(|r| confusion[r][i]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let w = support as f64 / total as f64;
        weighted.precision += w * precision;
        weighted.recall += w * recall;
        weighted.f1 += w * f1;
        per_class.insert(
            p,
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
                zero_support: support == 0,
            },
        );
    }
    Ok(EvalReport {
        total,
        accuracy: correct as f64 / total as f64,
        weighted,
        per_class,
        confusion,
        length_buckets: BTreeMap::new(),
        argmax_ties: 0,
    })
}

pub const BUCKET_LABELS: [&str; 6] = ["0-100", "100-200", "200-300", "300-400", "400-500", ">500"];

/// Word-count bucket: `(100k, 100(k+1)]`, with everything above 500 in the
/// last bucket.
pub fn length_bucket(words: usize) -> &'static str {
    let i = if words == 0 { 0 } else { (words - 1) / 100 };
    BUCKET_LABELS[i.min(BUCKET_LABELS.len() - 1)]
}

/// Accuracy per non-empty length bucket.
pub fn bucket_accuracy(
    word_counts: &[usize],
    gold: &[Priority],
    pred: &[Priority],
) -> BTreeMap<String, f64> {
    let mut hits: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for ((&w, g), p) in word_counts.iter().zip(gold).zip(pred) {
        let e = hits.entry(length_bucket(w)).or_default();
        e.0 += usize::from(g == p);
        e.1 += 1;
    }
    hits.into_iter()
        .map(|(k, (c, n))| (k.to_string(), c as f64 / n as f64))
        .collect()
}

fn labeled(reports: &[BugReport]) -> Result<Vec<(&BugReport, Priority)>> {
    reports
        .iter()
        .map(|r| {
            r.priority
                .map(|p| (r, p))
                .ok_or_else(|| Error::invalid(format!("report {} has no priority label", r.id)))
        })
        .collect()
}

/// Argmax predictions (lowest index on ties) and the tie count.
pub fn predict_labels(
    reports: &[BugReport],
    model: &Model<f32>,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<(Vec<Priority>, usize)> {
    check_max_len(model, max_len)?;
    let mut ties = 0;
    let mut out = Vec::with_capacity(reports.len());
    for r in reports {
        let logits = logits_for(model, &prepare(r, vocab, max_len)?)?;
        let (p, tie) = argmax_lowest(&logits);
        if tie {
            log::debug!("argmax tie for report {}; picked {p}", r.id);
        }
        ties += usize::from(tie);
        out.push(p);
    }
    if ties > 0 {
        log::info!("{ties} argmax ties broken toward the lowest class index");
    }
    Ok((out, ties))
}

/// Full evaluation report, including length buckets.
pub fn evaluate(
    reports: &[BugReport],
    model: &Model<f32>,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EvalReport> {
    let items = labeled(reports)?;
    let gold: Vec<Priority> = items.iter().map(|&(_, p)| p).collect();
    let (pred, ties) = predict_labels(reports, model, vocab, max_len)?;
    let mut report = metrics(&gold, &pred)?;
    let words: Vec<usize> = reports.iter().map(word_count).collect();
    report.length_buckets = bucket_accuracy(&words, &gold, &pred);
    report.argmax_ties = ties;
    Ok(report)
}

pub fn length_bucket_report(
    reports: &[BugReport],
    model: &Model<f32>,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<BTreeMap<String, f64>> {
    let items = labeled(reports)?;
    let gold: Vec<Priority> = items.iter().map(|&(_, p)| p).collect();
    let (pred, _) = predict_labels(reports, model, vocab, max_len)?;
    let words: Vec<usize> = reports.iter().map(word_count).collect();
    Ok(bucket_accuracy(&words, &gold, &pred))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneParams {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub warmup_steps: u64,
    pub max_steps: Option<u64>,
    pub max_len: usize,
    pub adamw: AdamWConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_weighted_f1: Option<f64>,
    pub valid_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_valid_f1: Option<f64>,
}

/// Cross-entropy training of encoder and `W`. After each epoch the
/// validation weighted F1 is measured; the weights of the best epoch (the
/// later one on ties) are kept. Without a validation set, the final weights
/// are kept.
#[allow(clippy::too_many_arguments)]
pub fn finetune<R: Rng>(
    model: &mut Model<f32>,
    train: &[BugReport],
    valid: &[BugReport],
    vocab: &Vocabulary,
    params: &FinetuneParams,
    rng: &mut R,
    on_step: &mut dyn FnMut(&StepLog),
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FinetuneOutcome> {
    if params.batch_size == 0 {
        return Err(Error::Config(
            "finetune: batch size must be positive".into(),
        ));
    }
    check_max_len(model, params.max_len)?;
    let items = labeled(train)?;
    if items.is_empty() {
        return Err(Error::invalid("finetune: empty training set"));
    }
    labeled(valid)?;
    for p in Priority::ALL {
        if !items.iter().any(|&(_, q)| q == p) {
            log::warn!("finetune: class {p} absent from the training set");
        }
    }
    let data: Vec<(TokenSequence, usize)> = items
        .iter()
        .map(|&(r, p)| Ok((prepare(r, vocab, params.max_len)?, p.index())))
        .collect::<Result<_>>()?;
    let total = total_steps(
        data.len(),
        params.batch_size,
        params.epochs,
        params.max_steps,
    );
    let mut trainer = Trainer::new(model, ParamGroup::Finetune, params.adamw);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    for epoch in 1..=params.epochs {
        if trainer.steps_taken() >= total {
            break;
        }
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in epoch_batches(data.len(), params.batch_size, rng) {
            let step = trainer.steps_taken() + 1;
            if step > total {
                break;
            }
            let lr = lr_schedule(step, params.warmup_steps, total, params.lr)?;
            let cfg = model.config;
            let (loss, ()) = trainer.step(model, lr, |g, vars| {
                let mut mode = Mode::Train(&mut *rng);
                let mut pooled = Vec::with_capacity(idx.len());
                let mut targets = Vec::with_capacity(idx.len());
                for &i in &idx {
                    let (seq, label) = &data[i];
                    let h = encode(g, &vars.encoder, &cfg, seq, &mut mode)?;
                    pooled.push(mean_pool(g, h, &seq.attention_mask)?);
                    targets.push(Some(*label));
                }
                let pooled = g.concat_rows(&pooled)?;
                let logits = class_logits(g, pooled, vars)?;
                Ok((g.cross_entropy(logits, &targets)?, ()))
            })?;
            let entry = StepLog { step, lr, loss };
            on_step(&entry);
            steps.push(entry);
            loss_sum += loss;
            batches += 1;
        }
        let (valid_weighted_f1, valid_accuracy) = if valid.is_empty() {
            (None, None)
        } else {
            let r = evaluate(valid, model, vocab, params.max_len)?;
            (Some(r.weighted.f1), Some(r.accuracy))
        };
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            valid_weighted_f1,
            valid_accuracy,
        };
        on_epoch(&entry);
        epochs.push(entry);
        if let Some(f1) = valid_weighted_f1 {
            if best.as_ref().is_none_or(|(b, _, _)| f1 >= *b) {
                best = Some((f1, epoch, model.clone()));
            }
        }
    }
    let last_epoch = epochs.len();
    Ok(match best {
        Some((f1, epoch, weights)) => {
            *model = weights;
            FinetuneOutcome {
                steps,
                epochs,
                best_epoch: epoch,
                best_valid_f1: Some(f1),
            }
        }
        None => FinetuneOutcome {
            steps,
            epochs,
            best_epoch: last_epoch,
            best_valid_f1: None,
        },
    })
}

/// Pooled representation `[d]` of a report in eval mode.
pub fn pooled_representation(model: &Model<f32>, seq: &TokenSequence) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let vars = model.encoder.bind(&mut g);
    let h = encode(&mut g, &vars, &model.config, seq, &mut Mode::Eval)?;
    let p = mean_pool(&mut g, h, &seq.attention_mask)?;
    g.value(p).clone().reshape(vec![model.config.d_model])
}
