//! Generator for small labeled corpora whose priority is signalled by
//! class-specific keywords. Used by the test suites and the `gen-corpus`
//! subcommand.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BugReport, Priority};

/// Training-set label counts of the reference Mozilla/Eclipse corpus,
/// P1..P5.
pub const REFERENCE_LABEL_COUNTS: [usize; 5] = [34_544, 32_569, 102_634, 2_935, 3_906];

const KEYWORDS: [&[&str]; 5] = [
    &[
        "crash", "segfault", "dataloss", "deadlock", "hang", "corrupts",
    ],
    &[
        "regression",
        "exception",
        "broken",
        "fails",
        "unusable",
        "blocker",
    ],
    &["slow", "incorrect", "flaky", "misleading", "wrong", "stale"],
    &["tooltip", "wording", "padding", "spacing", "alignment"],
    &["typo", "cosmetic", "polish", "nicety", "whitespace"],
];

const COMPONENTS: &[&str] = &[
    "editor",
    "debugger",
    "parser",
    "toolbar",
    "window",
    "project",
    "build",
    "console",
    "dialog",
    "menu",
    "plugin",
    "installer",
    "search",
    "panel",
    "profiler",
    "navigator",
];

const FILLER: &[&str] = &[
    "the",
    "when",
    "after",
    "opening",
    "saving",
    "clicking",
    "on",
    "in",
    "with",
    "and",
    "a",
    "file",
    "view",
    "tab",
    "user",
    "settings",
    "shows",
    "update",
    "java",
    "code",
    "while",
    "using",
    "new",
    "version",
    "page",
    "list",
    "item",
    "selected",
    "default",
    "option",
    "assertTrue(x)",
    "NetBeans",
    "JUnit",
    "null",
    "index",
    "mode",
    "line",
    "text",
];

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub labeled: usize,
    pub unlabeled: usize,
    pub seed: u64,
    /// Relative class frequencies, P1..P5.
    pub class_weights: [usize; 5],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            labeled: 500,
            unlabeled: 0,
            seed: 0,
            class_weights: REFERENCE_LABEL_COUNTS,
        }
    }
}

/// Largest-remainder apportionment of `n` items to the weights, with every
/// class receiving at least one item when `n >= 5`.
pub fn apportion(n: usize, weights: &[usize; 5]) -> [usize; 5] {
    let total: usize = weights.iter().sum();
    let mut counts = [0usize; 5];
    let mut rema: Vec<(usize, usize)> = Vec::with_capacity(5);
    for (i, &w) in weights.iter().enumerate() {
        counts[i] = n * w / total;
        rema.push(((n * w) % total, i));
    }
    let left = n - counts.iter().sum::<usize>();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rema.iter().take(left) {
        counts[i] += 1;
    }
    if n >= 5 {
        for i in 0..5 {
            if counts[i] == 0 {
                let donor = (0..5).max_by_key(|&j| counts[j]).expect("five classes");
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
    }
    counts
}

fn sentence<R: Rng>(rng: &mut R, words: usize, keyword: Option<&str>) -> Vec<String> {
    let mut out: Vec<String> = (0..words)
        .map(|_| FILLER.choose(rng).expect("filler").to_string())
        .collect();
    if let Some(k) = keyword {
        let at = rng.random_range(0..=out.len());
        out.insert(at, k.to_string());
    }
    out
}

fn make_report<R: Rng>(rng: &mut R, id: usize, label: Option<Priority>) -> BugReport {
    let class = label
        .map(Priority::index)
        .unwrap_or_else(|| rng.random_range(0..5));
    let kw = KEYWORDS[class];
    let component = COMPONENTS.choose(rng).expect("component");
    let mut summary = vec![component.to_string()];
    let (n_summary, k1) = (rng.random_range(2..5), kw.choose(rng).copied());
    summary.extend(sentence(rng, n_summary, k1));
    let (n_desc, k2) = (rng.random_range(5..12), kw.choose(rng).copied());
    let description = sentence(rng, n_desc, k2);
    BugReport {
        id: format!("syn-{id:05}"),
        summary: summary.join(" "),
        description: description.join(" "),
        priority: label,
    }
}

pub fn generate(spec: &SyntheticSpec) -> Vec<BugReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let counts = apportion(spec.labeled, &spec.class_weights);
    let mut labels: Vec<Option<Priority>> = counts
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| std::iter::repeat_n(Priority::from_index(i), c))
        .collect();
    labels.extend(std::iter::repeat_n(None, spec.unlabeled));
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| make_report(&mut rng, i, l))
        .collect()
}
