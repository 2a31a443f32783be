//! Bug-report records: JSONL ingestion, model input text, splits and label
//! statistics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, LineError, Result};

pub mod synthetic;

/// Fix-urgency label, P1 highest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Priority {
    P1,
    P2,
    P3,
    P4,
    P5,
}

impl Priority {
    pub const ALL: [Priority; 5] = [
        Priority::P1,
        Priority::P2,
        Priority::P3,
        Priority::P4,
        Priority::P5,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        ["P1", "P2", "P3", "P4", "P5"][self.index()]
    }
}

impl fmt::Display for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Priority {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown priority label {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BugReport {
    pub id: String,
    pub summary: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priority: Option<Priority>,
}

impl BugReport {
    pub fn new(
        id: impl Into<String>,
        summary: impl Into<String>,
        description: impl Into<String>,
        priority: Option<Priority>,
    ) -> Result<Self> {
        let report = Self {
            id: id.into(),
            summary: summary.into(),
            description: description.into(),
            priority,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        if self.summary.trim().is_empty() {
            return Err(Error::invalid(format!(
                "report {:?}: summary is empty",
                self.id
            )));
        }
        Ok(())
    }
}

/// Wire form; priority stays a string so bad labels can be reported by name.
#[derive(Deserialize)]
struct RawRecord {
    id: String,
    summary: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    priority: Option<String>,
}

fn parse_line(line: &str) -> std::result::Result<BugReport, String> {
    let raw: RawRecord =
        serde_json::from_str(line).map_err(|e| format!("malformed record: {e}"))?;
    let priority = match raw.priority {
        None => None,
        Some(p) => Some(
            p.parse::<Priority>()
                .map_err(|_| format!("unknown priority {p:?} (expected P1..P5)"))?,
        ),
    };
    let report = BugReport {
        id: raw.id,
        summary: raw.summary,
        description: raw.description,
        priority,
    };
    report.validate().map_err(|e| e.to_string())?;
    Ok(report)
}

/// Parses JSONL text. Blank lines are skipped; every other invalid line is
/// collected with its 1-based line number.
pub fn parse_corpus(text: &str) -> std::result::Result<Vec<BugReport>, Vec<LineError>> {
    let mut reports = Vec::new();
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line) {
            Ok(r) => {
                if !seen.insert(r.id.clone()) {
                    errors.push(LineError {
                        line: i + 1,
                        message: format!("duplicate id {:?}", r.id),
                    });
                } else {
                    reports.push(r);
                }
            }
            Err(message) => errors.push(LineError {
                line: i + 1,
                message,
            }),
        }
    }
    if errors.is_empty() {
        Ok(reports)
    } else {
        Err(errors)
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<BugReport>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text).map_err(|errors| Error::Corpus {
        path: path.to_path_buf(),
        errors,
    })
}

pub fn write_corpus(path: impl AsRef<Path>, reports: &[BugReport]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Model input: the summary, one space, then the description. No other
/// normalization.
pub fn compose_text(report: &BugReport) -> String {
    if report.description.is_empty() {
        report.summary.clone()
    } else {
        format!("{} {}", report.summary, report.description)
    }
}

/// Whitespace-delimited word count of the composed text.
pub fn word_count(report: &BugReport) -> usize {
    compose_text(report).split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<BugReport>,
    pub valid: Vec<BugReport>,
    pub test: Vec<BugReport>,
    pub seed: u64,
}

/// Seeded shuffle, then `floor(0.8N)` train, `floor(0.1N)` valid, remainder test.
pub fn split_dataset(reports: &[BugReport], seed: u64) -> Result<DatasetSplit> {
    let n = reports.len();
    if n < 10 {
        return Err(Error::invalid(format!(
            "split_dataset needs at least 10 reports, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    let pick = |idx: &[usize]| idx.iter().map(|&i| reports[i].clone()).collect::<Vec<_>>();
    Ok(DatasetSplit {
        train: pick(&order[..n_train]),
        valid: pick(&order[n_train..n_train + n_valid]),
        test: pick(&order[n_train + n_valid..]),
        seed,
    })
}

pub fn filter_labeled(reports: &[BugReport]) -> Vec<BugReport> {
    reports
        .iter()
        .filter(|r| r.priority.is_some())
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelHistogram {
    pub counts: BTreeMap<Priority, usize>,
}

impl LabelHistogram {
    pub fn count(&self, p: Priority) -> usize {
        self.counts.get(&p).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

pub fn label_histogram(reports: &[BugReport]) -> LabelHistogram {
    let mut counts: BTreeMap<Priority, usize> = Priority::ALL.iter().map(|&p| (p, 0)).collect();
    for p in reports.iter().filter_map(|r| r.priority) {
        *counts.entry(p).or_default() += 1;
    }
    LabelHistogram { counts }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn report(id: usize, p: Option<Priority>) -> BugReport {
        BugReport::new(format!("r{id}"), format!("summary {id}"), "", p).unwrap()
    }

    #[test]
    fn parses_three_valid_lines() {
        let text = r#"{"id":"1","summary":"a","description":"b","priority":"P1"}
{"id":"2","summary":"c","description":""}
{"id":"3","summary":"d","description":"e","priority":"P5"}
"#;
        let reports = parse_corpus(text).unwrap();
        assert_eq!(reports.len(), 3);
        assert_eq!(reports[1].priority, None);
        assert_eq!(reports[2].priority, Some(Priority::P5));
    }

    #[test]
    fn bad_priority_names_line_and_label() {
        let text = r#"{"id":"1","summary":"a","description":"b","priority":"P1"}
{"id":"2","summary":"a","description":"b","priority":"P6"}
"#;
        let errs = parse_corpus(text).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].line, 2);
        assert!(errs[0].message.contains("P6"), "{}", errs[0].message);
    }

    #[test]
    fn malformed_and_empty_summary_are_collected() {
        let text =
            "{\"id\":\"1\",\"summary\":\"  \"}\nnot json\n{\"id\":\"3\",\"summary\":\"x\"}\n";
        let errs = parse_corpus(text).unwrap_err();
        assert_eq!(errs.iter().map(|e| e.line).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn load_reports_unreadable_file() {
        assert!(matches!(
            load_corpus("/nonexistent/corpus.jsonl"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn compose_joins_with_one_space() {
        let r = BugReport::new("x", "A", "B", None).unwrap();
        assert_eq!(compose_text(&r), "A B");
        let r = BugReport::new("x", "A", "", None).unwrap();
        assert_eq!(compose_text(&r), "A");
    }

    #[test]
    fn compose_keeps_text_verbatim() {
        let r = BugReport::new(
            "1",
            "Pasting code with JUnit asserts",
            "When pasting assertTrue(x) into NetBeans",
            Some(Priority::P3),
        )
        .unwrap();
        let t = compose_text(&r);
        assert!(t.starts_with("Pasting code with JUnit asserts"));
        assert!(t.contains("assertTrue(x)"));
    }

    #[test]
    fn split_of_ten_is_8_1_1_and_deterministic() {
        let reports: Vec<_> = (0..10).map(|i| report(i, None)).collect();
        let a = split_dataset(&reports, 42).unwrap();
        assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (8, 1, 1));
        assert_eq!(a, split_dataset(&reports, 42).unwrap());
        assert!(split_dataset(&reports[..9], 42).is_err());
    }

    #[test]
    fn filter_preserves_order() {
        let reports = vec![
            report(0, Some(Priority::P2)),
            report(1, None),
            report(2, Some(Priority::P1)),
            report(3, None),
            report(4, Some(Priority::P2)),
        ];
        let ids: Vec<_> = filter_labeled(&reports).into_iter().map(|r| r.id).collect();
        assert_eq!(ids, vec!["r0", "r2", "r4"]);
        assert!(filter_labeled(&[report(9, None)]).is_empty());
    }

    #[test]
    fn histogram_counts_each_label() {
        let reports = vec![
            report(0, Some(Priority::P1)),
            report(1, Some(Priority::P1)),
            report(2, Some(Priority::P3)),
            report(3, None),
        ];
        let h = label_histogram(&reports);
        assert_eq!(h.count(Priority::P1), 2);
        assert_eq!(h.count(Priority::P3), 1);
        assert_eq!(h.count(Priority::P5), 0);
        assert_eq!(h.total(), 3);
        assert!(label_histogram(&[]).counts.values().all(|&c| c == 0));
    }

    fn arb_reports() -> impl Strategy<Value = Vec<BugReport>> {
        prop::collection::vec(prop::option::of(0usize..5), 10..120).prop_map(|labels| {
            labels
                .into_iter()
                .enumerate()
                .map(|(i, l)| report(i, l.and_then(Priority::from_index)))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn split_is_a_partition(reports in arb_reports(), seed in any::<u64>()) {
            let s = split_dataset(&reports, seed).unwrap();
            let n = reports.len();
            prop_assert_eq!(s.train.len(), n * 8 / 10);
            prop_assert_eq!(s.valid.len(), n / 10);
            let mut ids: Vec<&str> = s.train.iter().chain(&s.valid).chain(&s.test)
                .map(|r| r.id.as_str()).collect();
            ids.sort_unstable();
            let mut expected: Vec<&str> = reports.iter().map(|r| r.id.as_str()).collect();
            expected.sort_unstable();
            prop_assert_eq!(ids, expected);
        }

        #[test]
        fn histogram_of_filtered_matches_naive_scan(reports in arb_reports()) {
            let h = label_histogram(&filter_labeled(&reports));
            for p in Priority::ALL {
                let naive = reports.iter().filter(|r| r.priority == Some(p)).count();
                prop_assert_eq!(h.count(p), naive);
            }
        }
    }
}
