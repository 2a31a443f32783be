use bugprio::autodiff::lr_schedule;
use bugprio::checkpoint::{Checkpoint, Stage};
use bugprio::classifier::metrics;
use bugprio::config::RunConfig;
use bugprio::contrastive::{cl_loss_pairs, AugmentMethod};
use bugprio::corpus::synthetic::{generate, SyntheticSpec};
use bugprio::corpus::{filter_labeled, Priority};
use bugprio::mlm::{dynamic_mask, mask_count};
use bugprio::model::Model;
use bugprio::pipeline::{self, ablate, median, Grid, LR_GRID};
use bugprio::tokenizer::{frame, is_special, TokenId};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    for (k, v) in [
        ("vocab.size", "400"),
        ("mlm.max_steps", "20"),
        ("mlm.warmup_steps", "5"),
        ("cl.max_steps", "6"),
        ("cl.warmup_steps", "2"),
        ("finetune.epochs", "2"),
        ("finetune.warmup_steps", "2"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

fn fresh_checkpoint(
    cfg: &RunConfig,
    vocab: &bugprio::tokenizer::Vocabulary,
    seed: u64,
) -> Checkpoint {
    let mut cfg = cfg.clone();
    cfg.encoder.vocab_size = vocab.len();
    let model = Model::init(cfg.encoder, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    Checkpoint::new(Stage::Mlm, vocab, cfg, model).unwrap()
}

#[test]
fn finetune_overfits_small_separable_set() {
    // 100 keyword-labeled reports, desk config, 30 epochs, no pre-training.
    let corpus = generate(&SyntheticSpec {
        labeled: 100,
        class_weights: [1, 1, 1, 1, 1],
        seed: 5,
        ..SyntheticSpec::default()
    });
    let cfg = RunConfig::desk();
    assert_eq!(cfg.finetune.epochs, 30);
    let vocab = pipeline::build_vocab(&corpus, cfg.vocab_size).unwrap();
    let mut accs = Vec::new();
    for seed in 0..3 {
        let mut c = cfg.clone();
        c.seed = seed;
        let init = fresh_checkpoint(&c, &vocab, seed);
        let (ft, outcome) =
            pipeline::run_finetune(&c, &vocab, &corpus, &[], &init, &mut |_| {}, &mut |_| {})
                .unwrap();
        assert_eq!(outcome.epochs.len(), 30);
        assert_eq!(ft.stage, Stage::Finetuned);
        accs.push(
            pipeline::run_evaluate(&ft, &vocab, &corpus, c.finetune.max_len)
                .unwrap()
                .accuracy,
        );
    }
    assert!(median(&accs) >= 0.95, "training accuracies {accs:?}");
}

#[test]
fn paper_manifest_values() {
    let p = RunConfig::paper();
    assert_eq!(
        (
            p.finetune.batch_size,
            p.finetune.lr,
            p.finetune.epochs,
            p.finetune.max_len
        ),
        (64, 5e-6, 10, 256)
    );
    assert_eq!(
        (
            p.encoder.layers,
            p.encoder.heads,
            p.encoder.d_model,
            p.encoder.d_ff
        ),
        (12, 12, 768, 3072)
    );
    assert_eq!(LR_GRID, [1e-6, 2.5e-6, 5e-6, 7.5e-6, 1e-5]);
}

#[test]
fn stage_order_is_enforced() {
    let corpus = generate(&SyntheticSpec {
        labeled: 40,
        ..SyntheticSpec::default()
    });
    let cfg = quick_config();
    let vocab = pipeline::build_vocab(&corpus, cfg.vocab_size).unwrap();
    let (mlm, log) = pipeline::run_mlm(&cfg, &vocab, &corpus, &mut |_| {}).unwrap();
    assert_eq!(log.len(), 20);
    assert_eq!(mlm.stage, Stage::Mlm);
    let (ft, _) =
        pipeline::run_finetune(&cfg, &vocab, &corpus, &[], &mlm, &mut |_| {}, &mut |_| {}).unwrap();

    let err = pipeline::run_cl(&cfg, &vocab, &corpus, &ft, false, &mut |_| {}).unwrap_err();
    assert!(err.to_string().contains("mlm-tagged"), "{err}");
    let (cl, _) = pipeline::run_cl(&cfg, &vocab, &corpus, &ft, true, &mut |_| {}).unwrap();
    assert_eq!(cl.stage, Stage::Cl);

    let other = pipeline::build_vocab(&corpus, 300).unwrap();
    let err = pipeline::run_finetune(&cfg, &other, &corpus, &[], &mlm, &mut |_| {}, &mut |_| {})
        .unwrap_err();
    assert!(
        err.to_string().contains("vocabulary hash mismatch"),
        "{err}"
    );

    let mut wider = cfg.clone();
    wider.encoder.d_model = 64;
    wider.encoder.d_ff = 256;
    assert!(pipeline::run_cl(&wider, &vocab, &corpus, &mlm, false, &mut |_| {}).is_err());
}

#[test]
fn pretraining_never_sees_held_out_reports() {
    let corpus = generate(&SyntheticSpec {
        labeled: 50,
        unlabeled: 7,
        ..SyntheticSpec::default()
    });
    let data = pipeline::prepare_data(&quick_config(), &corpus).unwrap();
    assert_eq!(data.pretrain.len(), data.split.train.len() + 7);
    for r in data.split.valid.iter().chain(&data.split.test) {
        assert!(!data.pretrain.iter().any(|p| p.id == r.id));
    }
    assert_eq!(filter_labeled(&data.pretrain).len(), data.split.train.len());
}

#[test]
fn grids_have_the_expected_rows() {
    let corpus = generate(&SyntheticSpec {
        labeled: 30,
        ..SyntheticSpec::default()
    });
    let cfg = quick_config();
    let lr = ablate(Grid::Lr, &cfg, &corpus, &[1], &mut |_| {}).unwrap();
    let labels: Vec<&str> = lr.cells.iter().map(|c| c.label.as_str()).collect();
    assert_eq!(labels, ["1e-6", "2.5e-6", "5e-6", "7.5e-6", "1e-5"]);
    let aug = ablate(Grid::Augment, &cfg, &corpus, &[1], &mut |_| {}).unwrap();
    let labels: Vec<&str> = aug.cells.iter().map(|c| c.label.as_str()).collect();
    assert_eq!(labels, ["mask", "delete", "swap"]);
    assert_eq!(AugmentMethod::ALL.len(), 3);
    for cell in lr.cells.iter().chain(&aug.cells) {
        assert_eq!(cell.weighted_f1.len(), 1);
        assert!((0.0..=1.0).contains(&cell.median_weighted_f1));
    }
    let table = aug.to_table();
    assert!(table.lines().count() >= 4, "{table}");
    let json = serde_json::to_value(&aug).unwrap();
    assert_eq!(json["grid"], "augment");
}

fn priorities() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0usize..5, 0usize..5), 1..200)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn weighted_recall_equals_accuracy(pairs in priorities()) {
        let gold: Vec<Priority> = pairs.iter().map(|p| Priority::from_index(p.0).unwrap()).collect();
        let pred: Vec<Priority> = pairs.iter().map(|p| Priority::from_index(p.1).unwrap()).collect();
        let r = metrics(&gold, &pred).unwrap();
        prop_assert!((r.weighted.recall - r.accuracy).abs() < 1e-12);
        for m in r.per_class.values() {
            prop_assert!((0.0..=1.0).contains(&m.f1));
            prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
        }
        let supports: usize = r.per_class.values().map(|m| m.support).sum();
        prop_assert_eq!(supports, gold.len());
    }

    #[test]
    fn masking_respects_frame(len in 1usize..60, pad in 0usize..8, rate in 0.01f64..0.9, seed in any::<u64>()) {
        let ids: Vec<TokenId> = (0..len as TokenId).map(|i| 300 + i).collect();
        let seq = frame(&ids, len + 2 + pad).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = dynamic_mask(&seq, 500, rate, &mut rng).unwrap();
        prop_assert_eq!(m.positions.len(), mask_count(len, rate));
        for &p in &m.positions {
            prop_assert!(seq.content_positions().contains(&p));
        }
        prop_assert!(m.positions.windows(2).all(|w| w[0] < w[1]));
        for (i, &id) in m.input.ids.iter().enumerate() {
            if !m.positions.contains(&i) {
                prop_assert_eq!(id, seq.ids[i]);
            } else {
                prop_assert!(!is_special(id) || id == bugprio::tokenizer::MASK);
            }
        }
    }

    #[test]
    fn cl_loss_is_nonnegative_and_bounded(n in 1usize..6, d in 1usize..6, tau in 0.05f64..3.0, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut row = || -> Vec<f64> { (0..d).map(|_| rng.random_range(0.1..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect() };
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..n).map(|_| (row(), row())).collect();
        let loss = cl_loss_pairs(&pairs, tau).unwrap();
        // Cosines lie in [−1, 1], so each term is at most ln(n) + 2/τ.
        prop_assert!(loss >= -1e-12);
        prop_assert!(loss <= (n as f64).ln() + 2.0 / tau + 1e-9);
    }

    #[test]
    fn lr_schedule_is_bounded(warmup in 0u64..100, extra in 1u64..1000, step in 0u64..1200, peak in 1e-6f64..1e-2) {
        let total = warmup + extra;
        let lr = lr_schedule(step.min(total), warmup, total, peak).unwrap();
        prop_assert!((0.0..=peak * (1.0 + 1e-12)).contains(&lr));
        prop_assert!(lr_schedule(total, warmup, total, peak).unwrap().abs() < 1e-15);
        if warmup > 0 {
            prop_assert!((lr_schedule(warmup, warmup, total, peak).unwrap() - peak).abs() < 1e-12 * peak);
        }
    }
}
