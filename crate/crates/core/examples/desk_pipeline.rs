//! End-to-end desk run on the synthetic corpus; prints per-seed scores.
//!
//!     cargo run --release -p bugprio-core --example desk_pipeline -- 0 1 2

use std::time::Instant;

use bugprio::config::RunConfig;
use bugprio::corpus::synthetic::{generate, SyntheticSpec};
use bugprio::corpus::Priority;
use bugprio::pipeline::run_pipeline;

fn main() -> bugprio::Result<()> {
    let seeds: Vec<u64> = std::env::args()
        .skip(1)
        .filter_map(|s| s.parse().ok())
        .collect();
    let seeds = if seeds.is_empty() {
        vec![0, 1, 2]
    } else {
        seeds
    };
    let corpus = generate(&SyntheticSpec::default());
    for seed in seeds {
        let mut cfg = RunConfig::desk();
        cfg.seed = seed;
        // e.g. DESK_SET="finetune.lr=2e-3,mlm.max_steps=300"
        for kv in std::env::var("DESK_SET")
            .unwrap_or_default()
            .split(',')
            .filter(|s| !s.is_empty())
        {
            let (k, v) = kv.split_once('=').expect("key=value");
            cfg.set(k.trim(), v.trim())?;
        }
        let t = Instant::now();
        let out = run_pipeline(&cfg, &corpus, true)?;
        let f1 = |r: &bugprio::classifier::EvalReport, p| r.per_class[&p].f1;
        println!(
            "seed {seed}: {:.1}s mlm_loss {:.3} -> {:.3} train acc {:.3} P4 {:.3} P5 {:.3} | test acc {:.3} wF1 {:.3} P4 {:.3} P5 {:.3} best_epoch {}",
            t.elapsed().as_secs_f64(),
            out.mlm_log.first().map_or(f64::NAN, |l| l.loss),
            out.mlm_log.last().map_or(f64::NAN, |l| l.loss),
            out.train_report.accuracy,
            f1(&out.train_report, Priority::P4),
            f1(&out.train_report, Priority::P5),
            out.test_report.accuracy,
            out.test_report.weighted.f1,
            f1(&out.test_report, Priority::P4),
            f1(&out.test_report, Priority::P5),
            out.finetune.best_epoch,
        );
    }
    Ok(())
}
