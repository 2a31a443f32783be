//! Stage runners shared by the CLI, the Python bindings and the test suites.
//!
//! All randomness derives from `RunConfig::seed`: each stage draws from its
//! own ChaCha stream of that seed, so changing one stage never perturbs the
//! random draws of another.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::classifier::{evaluate, finetune, EpochLog, EvalReport, FinetuneOutcome};
use crate::config::RunConfig;
use crate::contrastive::{pretrain_cl, AugmentMethod, ClOutcome, ClStepLog};
use crate::corpus::{compose_text, filter_labeled, split_dataset, BugReport, DatasetSplit};
use crate::error::{Error, Result};
use crate::mlm::{pretrain_mlm, StepLog};
use crate::model::Model;
use crate::tokenizer::{self, frame_unpadded, train_bpe, TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    Init = 1,
    Mlm = 2,
    Cl = 3,
    Finetune = 4,
}

pub fn stage_rng(seed: u64, stream: SeedStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// BPE vocabulary over the composed text of `reports`.
pub fn build_vocab(reports: &[BugReport], target_size: usize) -> Result<Vocabulary> {
    let texts: Vec<String> = reports.iter().map(compose_text).collect();
    train_bpe(&texts, target_size)
}

pub fn frame_reports(
    reports: &[BugReport],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<TokenSequence>> {
    reports
        .iter()
        .map(|r| frame_unpadded(&tokenizer::encode(&compose_text(r), vocab), max_len))
        .collect()
}

/// Fresh model, then MLM training over `reports` (labels ignored).
pub fn run_mlm(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    reports: &[BugReport],
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<(Checkpoint, Vec<StepLog>)> {
    let mut cfg = cfg.clone();
    cfg.encoder.vocab_size = vocab.len();
    cfg.validate()?;
    if reports.is_empty() {
        return Err(Error::invalid("pretrain-mlm: empty corpus"));
    }
    let mut model = Model::init(cfg.encoder, &mut stage_rng(cfg.seed, SeedStream::Init))?;
    let seqs = frame_reports(reports, vocab, cfg.mlm_max_len)?;
    let log = pretrain_mlm(
        &mut model,
        &seqs,
        &cfg.mlm,
        &mut stage_rng(cfg.seed, SeedStream::Mlm),
        on_step,
    )?;
    Ok((Checkpoint::new(Stage::Mlm, vocab, cfg, model)?, log))
}

/// Stage hyperparameters come from `cfg`; the architecture must match the
/// checkpoint's.
fn adopt_architecture(cfg: &RunConfig, init: &Checkpoint) -> Result<RunConfig> {
    let (a, b) = (&cfg.encoder, &init.model.config);
    if (a.layers, a.heads, a.d_model, a.d_ff, a.max_len)
        != (b.layers, b.heads, b.d_model, b.d_ff, b.max_len)
    {
        return Err(Error::Config(format!(
            "configured encoder (L={}, h={}, d={}, dff={}, max_len={}) does not match the checkpoint's (L={}, h={}, d={}, dff={}, max_len={})",
            a.layers, a.heads, a.d_model, a.d_ff, a.max_len, b.layers, b.heads, b.d_model, b.d_ff, b.max_len
        )));
    }
    let mut out = cfg.clone();
    out.encoder.vocab_size = b.vocab_size;
    out.validate()?;
    Ok(out)
}

/// Contrastive pre-training from `init`, which must be MLM-tagged unless
/// `allow_any_init`.
pub fn run_cl(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    reports: &[BugReport],
    init: &Checkpoint,
    allow_any_init: bool,
    on_step: &mut dyn FnMut(&ClStepLog),
) -> Result<(Checkpoint, ClOutcome)> {
    init.check_vocab(vocab)?;
    if init.stage != Stage::Mlm && !allow_any_init {
        return Err(Error::Checkpoint(format!(
            "pretrain-cl needs an mlm-tagged checkpoint, got {} (use --allow-any-init to override)",
            init.stage
        )));
    }
    let cfg = adopt_architecture(cfg, init)?;
    let mut model = init.model.clone();
    model.config = cfg.encoder;
    let texts: Vec<String> = reports.iter().map(compose_text).collect();
    let outcome = pretrain_cl(
        &mut model,
        &texts,
        vocab,
        &cfg.cl,
        &mut stage_rng(cfg.seed, SeedStream::Cl),
        on_step,
    )?;
    Ok((Checkpoint::new(Stage::Cl, vocab, cfg, model)?, outcome))
}

/// Fine-tuning on the labeled part of `train`, best epoch chosen on `valid`.
pub fn run_finetune(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    train: &[BugReport],
    valid: &[BugReport],
    init: &Checkpoint,
    on_step: &mut dyn FnMut(&StepLog),
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(Checkpoint, FinetuneOutcome)> {
    init.check_vocab(vocab)?;
    let cfg = adopt_architecture(cfg, init)?;
    let mut model = init.model.clone();
    model.config = cfg.encoder;
    let train = filter_labeled(train);
    let valid = filter_labeled(valid);
    let outcome = finetune(
        &mut model,
        &train,
        &valid,
        vocab,
        &cfg.finetune,
        &mut stage_rng(cfg.seed, SeedStream::Finetune),
        on_step,
        on_epoch,
    )?;
    Ok((
        Checkpoint::new(Stage::Finetuned, vocab, cfg, model)?,
        outcome,
    ))
}

pub fn run_evaluate(
    ckpt: &Checkpoint,
    vocab: &Vocabulary,
    test: &[BugReport],
    max_len: usize,
) -> Result<EvalReport> {
    ckpt.check_vocab(vocab)?;
    let test = filter_labeled(test);
    evaluate(&test, &ckpt.model, vocab, max_len)
}

/// Data for an end-to-end run: labeled reports are split 80/10/10; the
/// pre-training stages see the training split plus every unlabeled report,
/// never the validation or test reports.
#[derive(Debug, Clone)]
pub struct PipelineData {
    pub split: DatasetSplit,
    pub pretrain: Vec<BugReport>,
    pub vocab: Vocabulary,
}

pub fn prepare_data(cfg: &RunConfig, corpus: &[BugReport]) -> Result<PipelineData> {
    let labeled = filter_labeled(corpus);
    let split = split_dataset(&labeled, cfg.seed)?;
    let mut pretrain = split.train.clone();
    pretrain.extend(corpus.iter().filter(|r| r.priority.is_none()).cloned());
    let vocab = build_vocab(&pretrain, cfg.vocab_size)?;
    Ok(PipelineData {
        split,
        pretrain,
        vocab,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub mlm_log: Vec<StepLog>,
    pub cl: Option<ClOutcome>,
    pub finetune: FinetuneOutcome,
    pub model: Checkpoint,
    pub train_report: EvalReport,
    pub test_report: EvalReport,
}

/// Runs the stages after MLM from a given MLM checkpoint.
pub fn run_after_mlm(
    cfg: &RunConfig,
    data: &PipelineData,
    mlm: &Checkpoint,
    with_cl: bool,
) -> Result<(Option<ClOutcome>, FinetuneOutcome, Checkpoint)> {
    let (init, cl) = if with_cl {
        let (c, o) = run_cl(cfg, &data.vocab, &data.pretrain, mlm, false, &mut |_| {})?;
        (c, Some(o))
    } else {
        (mlm.clone(), None)
    };
    let (ft, outcome) = run_finetune(
        cfg,
        &data.vocab,
        &data.split.train,
        &data.split.valid,
        &init,
        &mut |_| {},
        &mut |_| {},
    )?;
    Ok((cl, outcome, ft))
}

/// MLM → (CL) → fine-tuning → evaluation on the train and test splits.
pub fn run_pipeline(
    cfg: &RunConfig,
    corpus: &[BugReport],
    with_cl: bool,
) -> Result<PipelineOutcome> {
    let data = prepare_data(cfg, corpus)?;
    let (mlm, mlm_log) = run_mlm(cfg, &data.vocab, &data.pretrain, &mut |_| {})?;
    let (cl, finetune, model) = run_after_mlm(cfg, &data, &mlm, with_cl)?;
    let max_len = cfg.finetune.max_len;
    let train_report = run_evaluate(&model, &data.vocab, &data.split.train, max_len)?;
    let test_report = run_evaluate(&model, &data.vocab, &data.split.test, max_len)?;
    Ok(PipelineOutcome {
        mlm_log,
        cl,
        finetune,
        model,
        train_report,
        test_report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grid {
    Augment,
    Lr,
    #[serde(rename = "cl-onoff")]
    ClOnOff,
}

impl std::str::FromStr for Grid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "augment" => Ok(Grid::Augment),
            "lr" => Ok(Grid::Lr),
            "cl-onoff" => Ok(Grid::ClOnOff),
            _ => Err(Error::Config(format!(
                "unknown grid {s:?} (expected augment, lr or cl-onoff)"
            ))),
        }
    }
}

/// Fine-tuning learning rates of the published sweep.
pub const LR_GRID: [f64; 5] = [1e-6, 2.5e-6, 5e-6, 7.5e-6, 1e-5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub weighted_f1: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub median_weighted_f1: f64,
    pub median_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub grid: Grid,
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
    pub warnings: Vec<String>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn lr_label(lr: f64) -> String {
    format!("{lr:e}")
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = self
            .cells
            .iter()
            .map(|c| c.label.len())
            .max()
            .unwrap_or(4)
            .max(4);
        let _ = writeln!(
            out,
            "{:<width$}  {:>11}  {:>8}",
            "cell", "weighted_f1", "accuracy"
        );
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{:<width$}  {:>11.4}  {:>8.4}",
                c.label, c.median_weighted_f1, c.median_accuracy
            );
        }
        let _ = writeln!(out, "(medians over seeds {:?}, test split)", self.seeds);
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

/// Runs every cell of `grid` for every seed, reusing the MLM checkpoint of a
/// seed across cells (and the CL checkpoint in the learning-rate grid).
/// Scores are weighted F1 and accuracy on the test split.
pub fn ablate(
    grid: Grid,
    base: &RunConfig,
    corpus: &[BugReport],
    seeds: &[u64],
    progress: &mut dyn FnMut(&str),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config(
            "ablate: at least one seed is required".into(),
        ));
    }
    base.validate()?;
    let labels: Vec<String> = match grid {
        Grid::Augment => AugmentMethod::ALL.iter().map(|m| m.to_string()).collect(),
        Grid::Lr => LR_GRID.iter().map(|&l| lr_label(l)).collect(),
        Grid::ClOnOff => vec!["w/o CL".into(), "w/ CL".into()],
    };
    let mut scores: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); labels.len()];
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let data = prepare_data(&cfg, corpus)?;
        progress(&format!("seed {seed}: mlm"));
        let (mlm, _) = run_mlm(&cfg, &data.vocab, &data.pretrain, &mut |_| {})?;
        let mut score = |cell: usize, init: &Checkpoint, cfg: &RunConfig| -> Result<()> {
            progress(&format!("seed {seed}: {}", labels[cell]));
            let (ft, _) = run_finetune(
                cfg,
                &data.vocab,
                &data.split.train,
                &data.split.valid,
                init,
                &mut |_| {},
                &mut |_| {},
            )?;
            let r = run_evaluate(&ft, &data.vocab, &data.split.test, cfg.finetune.max_len)?;
            scores[cell].0.push(r.weighted.f1);
            scores[cell].1.push(r.accuracy);
            Ok(())
        };
        match grid {
            Grid::Augment => {
                for (i, m) in AugmentMethod::ALL.iter().enumerate() {
                    let mut c = cfg.clone();
                    c.cl.method = *m;
                    let (cl, _) =
                        run_cl(&c, &data.vocab, &data.pretrain, &mlm, false, &mut |_| {})?;
                    score(i, &cl, &c)?;
                }
            }
            Grid::Lr => {
                let (cl, _) = run_cl(&cfg, &data.vocab, &data.pretrain, &mlm, false, &mut |_| {})?;
                for (i, &lr) in LR_GRID.iter().enumerate() {
                    let mut c = cfg.clone();
                    c.finetune.lr = lr;
                    score(i, &cl, &c)?;
                }
            }
            Grid::ClOnOff => {
                score(0, &mlm, &cfg)?;
                let (cl, _) = run_cl(&cfg, &data.vocab, &data.pretrain, &mlm, false, &mut |_| {})?;
                score(1, &cl, &cfg)?;
            }
        }
    }
    let cells: Vec<AblationCell> = labels
        .into_iter()
        .zip(scores)
        .map(|(label, (f1, acc))| AblationCell {
            label,
            median_weighted_f1: median(&f1),
            median_accuracy: median(&acc),
            weighted_f1: f1,
            accuracy: acc,
        })
        .collect();
    let mut warnings = Vec::new();
    if grid == Grid::ClOnOff && cells[1].median_weighted_f1 < cells[0].median_weighted_f1 {
        let w = format!(
            "contrastive stage lowered median weighted F1 ({:.4} < {:.4}); desk-scale variance is large",
            cells[1].median_weighted_f1, cells[0].median_weighted_f1
        );
        log::warn!("{w}");
        warnings.push(w);
    }
    Ok(AblationReport {
        grid,
        seeds: seeds.to_vec(),
        cells,
        warnings,
    })
}
