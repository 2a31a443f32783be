//! `bugprio`: one binary, one subcommand per pipeline stage.
//!
//! Training logs go to stdout as JSON lines; diagnostics go to stderr.
//! Exit status: 0 success, 1 validation/runtime failure, 2 usage error.

use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bugprio::checkpoint::{Checkpoint, Stage};
use bugprio::classifier::predict;
use bugprio::config::RunConfig;
use bugprio::contrastive::AugmentMethod;
use bugprio::corpus::synthetic::{generate, SyntheticSpec};
use bugprio::corpus::{
    filter_labeled, load_corpus, parse_corpus, split_dataset, write_corpus, BugReport,
};
use bugprio::pipeline::{self, Grid};
use bugprio::tokenizer::Vocabulary;
use bugprio::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "bugprio", version, about = "Bug-report priority inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources, lowest precedence first: preset, `--config` file
/// (or the input checkpoint's snapshot), `--set` overrides, dedicated flags.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set finetune.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a byte-level BPE vocabulary on a JSONL corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Masked-language-model pre-training from scratch.
    PretrainMlm {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Contrastive pre-training, continuing from an MLM checkpoint.
    PretrainCl {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        method: Option<AugmentMethod>,
        #[arg(long)]
        tau: Option<f64>,
        /// Accept an initial checkpoint of any stage.
        #[arg(long)]
        allow_any_init: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fine-tune the classifier; keeps the best-validation epoch.
    Finetune {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a fine-tuned model on a labeled test set.
    Evaluate {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Write the full JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Read one JSON bug report on stdin, print its priority distribution.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Run an ablation grid over several seeds.
    Ablate {
        #[arg(long, value_parser = ["augment", "lr", "cl-onoff"])]
        grid: String,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Write the JSON comparison here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a synthetic keyword-labeled corpus.
    GenCorpus {
        #[arg(long, default_value_t = 500)]
        labeled: usize,
        #[arg(long, default_value_t = 0)]
        unlabeled: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split labeled reports 80/10/10 into train/valid/test files; unlabeled
    /// reports go to unlabeled.jsonl.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn resolve_config(args: &ConfigArgs, base: Option<&RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&args.config, base) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(b)) => b.clone(),
        (None, None) => RunConfig::desk(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// JSON-lines sink on stdout.
struct LogOut(BufWriter<io::Stdout>);

impl LogOut {
    fn new() -> Self {
        LogOut(BufWriter::new(io::stdout()))
    }

    fn emit<T: Serialize>(&mut self, value: &T) {
        // A closed stdout must not abort training.
        if let Ok(line) = serde_json::to_string(value) {
            let _ = writeln!(self.0, "{line}");
        }
    }
}

impl Drop for LogOut {
    fn drop(&mut self) {
        let _ = self.0.flush();
    }
}

#[derive(Serialize)]
struct Saved<'a> {
    event: &'static str,
    stage: Stage,
    path: &'a Path,
    steps: u64,
}

fn load_inputs(vocab: &Path, ckpt: &Path) -> Result<(Vocabulary, Checkpoint)> {
    let vocab = Vocabulary::load(vocab)?;
    let ckpt = Checkpoint::load(ckpt)?;
    ckpt.check_vocab(&vocab)?;
    Ok((vocab, ckpt))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::BuildVocab {
            corpus,
            vocab_size,
            out,
            cfg,
        } => {
            let mut cfg = resolve_config(&cfg, None)?;
            if let Some(v) = vocab_size {
                cfg.set("vocab.size", &v.to_string())?;
            }
            let reports = load_corpus(&corpus)?;
            let vocab = pipeline::build_vocab(&reports, cfg.vocab_size)?;
            vocab.save(&out)?;
            LogOut::new().emit(&serde_json::json!({
                "event": "vocab",
                "path": out,
                "size": vocab.len(),
                "merges": vocab.merges().len(),
                "hash": vocab.fingerprint(),
            }));
        }
        Command::PretrainMlm {
            corpus,
            vocab,
            out,
            cfg,
        } => {
            let cfg = resolve_config(&cfg, None)?;
            let vocab = Vocabulary::load(&vocab)?;
            let reports = load_corpus(&corpus)?;
            let mut log = LogOut::new();
            let (ckpt, steps) = pipeline::run_mlm(&cfg, &vocab, &reports, &mut |s| log.emit(s))?;
            ckpt.save(&out)?;
            log.emit(&Saved {
                event: "checkpoint",
                stage: ckpt.stage,
                path: &out,
                steps: steps.len() as u64,
            });
        }
        Command::PretrainCl {
            corpus,
            vocab,
            init,
            out,
            method,
            tau,
            allow_any_init,
            cfg,
        } => {
            let (vocab, init) = load_inputs(&vocab, &init)?;
            let mut cfg = resolve_config(&cfg, Some(&init.config))?;
            if let Some(m) = method {
                cfg.cl.method = m;
            }
            if let Some(t) = tau {
                cfg.set("cl.tau", &t.to_string())?;
            }
            let reports = load_corpus(&corpus)?;
            let mut log = LogOut::new();
            let (ckpt, outcome) =
                pipeline::run_cl(&cfg, &vocab, &reports, &init, allow_any_init, &mut |s| {
                    log.emit(s)
                })?;
            ckpt.save(&out)?;
            log.emit(&Saved {
                event: "checkpoint",
                stage: ckpt.stage,
                path: &out,
                steps: outcome.log.len() as u64,
            });
        }
        Command::Finetune {
            train,
            valid,
            vocab,
            init,
            out,
            lr,
            cfg,
        } => {
            let (vocab, init) = load_inputs(&vocab, &init)?;
            let mut cfg = resolve_config(&cfg, Some(&init.config))?;
            if let Some(lr) = lr {
                cfg.set("finetune.lr", &lr.to_string())?;
            }
            let train = load_corpus(&train)?;
            let valid = match valid {
                Some(p) => load_corpus(&p)?,
                None => Vec::new(),
            };
            let log = std::cell::RefCell::new(LogOut::new());
            let (ckpt, outcome) = pipeline::run_finetune(
                &cfg,
                &vocab,
                &train,
                &valid,
                &init,
                &mut |s| log.borrow_mut().emit(s),
                &mut |e| log.borrow_mut().emit(e),
            )?;
            ckpt.save(&out)?;
            let mut log = log.into_inner();
            log.emit(&serde_json::json!({
                "event": "checkpoint",
                "stage": ckpt.stage,
                "path": out,
                "steps": outcome.steps.len(),
                "best_epoch": outcome.best_epoch,
                "best_valid_f1": outcome.best_valid_f1,
            }));
        }
        Command::Evaluate {
            test,
            model,
            vocab,
            report,
            max_len,
        } => {
            let (vocab, ckpt) = load_inputs(&vocab, &model)?;
            let test = load_corpus(&test)?;
            let max_len = max_len.unwrap_or(ckpt.config.finetune.max_len);
            let r = pipeline::run_evaluate(&ckpt, &vocab, &test, max_len)?;
            if let Some(path) = report {
                let text = serde_json::to_string_pretty(&r)?;
                std::fs::write(&path, text + "\n").map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
            }
            LogOut::new().emit(&serde_json::json!({
                "event": "evaluation",
                "total": r.total,
                "accuracy": r.accuracy,
                "weighted_f1": r.weighted.f1,
                "argmax_ties": r.argmax_ties,
            }));
        }
        Command::Predict {
            model,
            vocab,
            max_len,
        } => {
            let (vocab, ckpt) = load_inputs(&vocab, &model)?;
            let mut input = String::new();
            io::stdin()
                .read_to_string(&mut input)
                .map_err(|e| Error::Io {
                    path: "<stdin>".into(),
                    source: e,
                })?;
            let report = match parse_corpus(input.trim()) {
                Ok(mut r) if r.len() == 1 => r.remove(0),
                Ok(r) => {
                    return Err(Error::Config(format!(
                        "predict expects one record on stdin, got {}",
                        r.len()
                    )))
                }
                Err(errs) => {
                    return Err(Error::Corpus {
                        path: "<stdin>".into(),
                        errors: errs,
                    })
                }
            };
            let max_len = max_len.unwrap_or(ckpt.config.finetune.max_len);
            let dist = predict(&report, &ckpt.model, &vocab, max_len)?;
            LogOut::new().emit(&dist);
        }
        Command::Ablate {
            grid,
            corpus,
            seeds,
            report,
            cfg,
        } => {
            let grid: Grid = grid.parse()?;
            let cfg = resolve_config(&cfg, None)?;
            let reports = load_corpus(&corpus)?;
            let result =
                pipeline::ablate(grid, &cfg, &reports, &seeds, &mut |m| log::info!("{m}"))?;
            if let Some(path) = report {
                let text = serde_json::to_string_pretty(&result)?;
                std::fs::write(&path, text + "\n").map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
            }
            print!("{}", result.to_table());
        }
        Command::GenCorpus {
            labeled,
            unlabeled,
            seed,
            out,
        } => {
            let reports = generate(&SyntheticSpec {
                labeled,
                unlabeled,
                seed,
                ..SyntheticSpec::default()
            });
            write_corpus(&out, &reports)?;
        }
        Command::Split {
            corpus,
            seed,
            out_dir,
        } => {
            let reports = load_corpus(&corpus)?;
            let split = split_dataset(&filter_labeled(&reports), seed)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::Io {
                path: out_dir.clone(),
                source: e,
            })?;
            let unlabeled: Vec<BugReport> = reports
                .into_iter()
                .filter(|r| r.priority.is_none())
                .collect();
            for (name, part) in [
                ("train", &split.train),
                ("valid", &split.valid),
                ("test", &split.test),
                ("unlabeled", &unlabeled),
            ] {
                write_corpus(out_dir.join(format!("{name}.jsonl")), part)?;
            }
            LogOut::new().emit(&serde_json::json!({
                "event": "split",
                "train": split.train.len(),
                "valid": split.valid.len(),
                "test": split.test.len(),
                "unlabeled": unlabeled.len(),
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // --help / --version are not errors.
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
