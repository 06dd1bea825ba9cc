//! Exact match and edit similarity scoring, plus report emission.
//!
//! Both metrics run on whitespace-normalized strings so formatting-only
//! differences don't count against code content; the raw scores are kept
//! alongside for auditability. Aggregation buckets samples by context
//! length, with default thresholds straddling the 10,240-token gate.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::PathTaken;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error for {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

/// Trims the ends and collapses internal runs of spaces/tabs to one space.
pub fn normalize(s: &str) -> String {
    let trimmed = s.trim();
    let mut out = String::with_capacity(trimmed.len());
    let mut in_gap = false;
    for c in trimmed.chars() {
        if c == ' ' || c == '\t' {
            in_gap = true;
        } else {
            if in_gap {
                out.push(' ');
                in_gap = false;
            }
            out.push(c);
        }
    }
    out
}

/// Character-level Levenshtein distance, unit costs, two-row DP.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }

    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr: Vec<usize> = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let substitute = prev[j] + usize::from(ca != cb);
            let delete = prev[j + 1] + 1;
            let insert = curr[j] + 1;
            curr[j + 1] = substitute.min(delete).min(insert);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

fn similarity_on(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 100.0;
    }
    100.0 * (1.0 - levenshtein(a, b) as f64 / longest as f64)
}

/// True iff prediction and target are equal after [`normalize`].
pub fn exact_match(prediction: &str, target: &str) -> bool {
    normalize(prediction) == normalize(target)
}

/// Equality without normalization.
pub fn exact_match_raw(prediction: &str, target: &str) -> bool {
    prediction == target
}

/// 100 × (1 − Levenshtein / max length) over normalized strings;
/// both empty → 100.
pub fn edit_similarity(prediction: &str, target: &str) -> f64 {
    similarity_on(&normalize(prediction), &normalize(target))
}

/// The same formula without normalization.
pub fn edit_similarity_raw(prediction: &str, target: &str) -> f64 {
    similarity_on(prediction, target)
}

/// Bucket thresholds used when none are configured; they straddle the
/// default 10,240-token gate.
pub const DEFAULT_BUCKETS: [usize; 4] = [5000, 10000, 20000, 40000];

/// Human-readable label of the half-open range `context_tokens` falls in.
pub fn bucket_label(context_tokens: usize, thresholds: &[usize]) -> String {
    debug_assert!(thresholds.windows(2).all(|w| w[0] < w[1]));
    match thresholds.first() {
        None => "all".to_string(),
        Some(&first) if context_tokens < first => format!("<{first}"),
        Some(_) => {
            for pair in thresholds.windows(2) {
                if context_tokens < pair[1] {
                    return format!("{}-{}", pair[0], pair[1]);
                }
            }
            format!(">={}", thresholds.last().unwrap())
        }
    }
}

/// All bucket labels for a threshold list, in ascending range order.
pub fn bucket_labels(thresholds: &[usize]) -> Vec<String> {
    if thresholds.is_empty() {
        return vec!["all".to_string()];
    }
    let mut labels = vec![format!("<{}", thresholds[0])];
    for pair in thresholds.windows(2) {
        labels.push(format!("{}-{}", pair[0], pair[1]));
    }
    labels.push(format!(">={}", thresholds.last().unwrap()));
    labels
}

/// Per-sample evaluation outcome. `error` is set when the sample could not
/// be scored; such records carry zero scores and are excluded from means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub prediction: String,
    pub target: String,
    pub em: u8,
    pub es: f64,
    pub em_raw: u8,
    pub es_raw: f64,
    pub context_tokens: usize,
    /// None when the sample failed before path decision.
    pub path_taken: Option<PathTaken>,
    pub bucket: String,
    pub truncated_chunks: usize,
    pub truncated_query: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketSummary {
    pub bucket: String,
    pub n: usize,
    pub em_pct: f64,
    pub es_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Scored samples (error records are counted in `errors` instead).
    pub n: usize,
    pub errors: usize,
    pub em_pct: f64,
    pub es_mean: f64,
    pub em_raw_pct: f64,
    pub es_raw_mean: f64,
    pub truncated_chunks: usize,
    pub truncated_queries: usize,
    pub per_bucket: Vec<BucketSummary>,
    /// Resolved run settings, for reproducibility.
    pub config: serde_json::Value,
}

/// Aggregates records into overall and per-bucket means. Thresholds must be
/// strictly increasing. Every bucket row is emitted even when empty.
pub fn summarize(
    records: &[EvalRecord],
    thresholds: &[usize],
    config: serde_json::Value,
) -> EvalSummary {
    assert!(
        thresholds.windows(2).all(|w| w[0] < w[1]),
        "bucket thresholds must be strictly increasing"
    );
    let scored: Vec<&EvalRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let errors = records.len() - scored.len();

    let mean =
        |xs: &dyn Fn(&EvalRecord) -> f64, set: &[&EvalRecord]| -> f64 {
            if set.is_empty() {
                0.0
            } else {
                set.iter().map(|r| xs(r)).sum::<f64>() / set.len() as f64
            }
        };

    let mut per_bucket = Vec::new();
    for label in bucket_labels(thresholds) {
        let members: Vec<&EvalRecord> = scored
            .iter()
            .copied()
            .filter(|r| r.bucket == label)
            .collect();
        per_bucket.push(BucketSummary {
            bucket: label,
            n: members.len(),
            em_pct: mean(&|r| f64::from(r.em) * 100.0, &members),
            es_mean: mean(&|r| r.es, &members),
        });
    }

    EvalSummary {
        n: scored.len(),
        errors,
        em_pct: mean(&|r| f64::from(r.em) * 100.0, &scored),
        es_mean: mean(&|r| r.es, &scored),
        em_raw_pct: mean(&|r| f64::from(r.em_raw) * 100.0, &scored),
        es_raw_mean: mean(&|r| r.es_raw, &scored),
        truncated_chunks: scored.iter().map(|r| r.truncated_chunks).sum(),
        truncated_queries: scored.iter().filter(|r| r.truncated_query).count(),
        per_bucket,
        config,
    }
}

/// One record per line, in the given order.
pub fn write_records_jsonl(records: &[EvalRecord], path: &Path) -> Result<(), ReportError> {
    let io_err = |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for record in records {
        let line = serde_json::to_string(record).expect("record serialization is infallible");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)?;
    Ok(())
}

pub fn write_summary_json(summary: &EvalSummary, path: &Path) -> Result<(), ReportError> {
    let io_err = |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    let text = serde_json::to_string_pretty(summary).expect("summary serialization is infallible");
    writeln!(out, "{text}").map_err(io_err)?;
    out.flush().map_err(io_err)?;
    Ok(())
}

/// One row per bucket plus a TOTAL row.
pub fn write_summary_csv(summary: &EvalSummary, path: &Path) -> Result<(), ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    writer
        .write_record(["bucket", "n", "em_pct", "es_mean"])
        .map_err(csv_err)?;
    for bucket in &summary.per_bucket {
        writer
            .write_record([
                bucket.bucket.as_str(),
                &bucket.n.to_string(),
                &format!("{:.6}", bucket.em_pct),
                &format!("{:.6}", bucket.es_mean),
            ])
            .map_err(csv_err)?;
    }
    writer
        .write_record([
            "TOTAL",
            &summary.n.to_string(),
            &format!("{:.6}", summary.em_pct),
            &format!("{:.6}", summary.es_mean),
        ])
        .map_err(csv_err)?;
    writer.flush().map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_trims_and_collapses() {
        assert_eq!(normalize("  assign a = b;  "), "assign a = b;");
        assert_eq!(normalize("assign\t\ta  =   b;"), "assign a = b;");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize(" \t "), "");
        // only spaces and tabs collapse; other interior chars survive
        assert_eq!(normalize("a \t b"), "a b");
    }

    #[test]
    fn exact_match_uses_normalization() {
        assert!(exact_match("assign a = b;", "assign a = b;"));
        assert!(exact_match("  assign a = b;  ", "assign a = b;"));
        assert!(!exact_match("assign a = b;", "assign a = c;"));
        assert!(!exact_match_raw("  assign a = b;", "assign a = b;"));
        assert!(exact_match_raw("same", "same"));
    }

    #[test]
    fn edit_similarity_frozen_values() {
        assert_eq!(edit_similarity("same line", "same line"), 100.0);
        // one substitution over length 3
        let es = edit_similarity_raw("abc", "abd");
        assert!((es - 100.0 * (1.0 - 1.0 / 3.0)).abs() < 1e-9);
        assert_eq!(edit_similarity_raw("", "abc"), 0.0);
        assert_eq!(edit_similarity("", ""), 100.0);
        // normalization applies before the distance
        assert_eq!(edit_similarity("a   b", "a b"), 100.0);
    }

    #[test]
    fn levenshtein_frozen_values() {
        assert_eq!(levenshtein("", ""), 0);
        assert_eq!(levenshtein("abc", ""), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("flaw", "lawn"), 2);
        // char-level, not byte-level
        assert_eq!(levenshtein("é", "e"), 1);
    }

    // independent oracle: full-matrix DP
    fn naive_levenshtein(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in dp.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            dp[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let cost = usize::from(a[i - 1] != b[j - 1]);
                dp[i][j] = (dp[i - 1][j] + 1)
                    .min(dp[i][j - 1] + 1)
                    .min(dp[i - 1][j - 1] + cost);
            }
        }
        dp[a.len()][b.len()]
    }

    #[test]
    fn bucket_labels_partition_the_axis() {
        let t = DEFAULT_BUCKETS;
        assert_eq!(bucket_label(0, &t), "<5000");
        assert_eq!(bucket_label(4999, &t), "<5000");
        assert_eq!(bucket_label(5000, &t), "5000-10000");
        assert_eq!(bucket_label(9999, &t), "5000-10000");
        assert_eq!(bucket_label(10000, &t), "10000-20000");
        assert_eq!(bucket_label(39999, &t), "20000-40000");
        assert_eq!(bucket_label(40000, &t), ">=40000");
        assert_eq!(
            bucket_labels(&t),
            vec!["<5000", "5000-10000", "10000-20000", "20000-40000", ">=40000"]
        );
        assert_eq!(bucket_label(7, &[]), "all");
    }

    fn record(id: &str, em: u8, es: f64, context_tokens: usize) -> EvalRecord {
        EvalRecord {
            sample_id: id.to_string(),
            prediction: "p".to_string(),
            target: "t".to_string(),
            em,
            es,
            em_raw: em,
            es_raw: es,
            context_tokens,
            path_taken: Some(PathTaken::Direct),
            bucket: bucket_label(context_tokens, &DEFAULT_BUCKETS),
            truncated_chunks: 0,
            truncated_query: false,
            error: None,
        }
    }

    #[test]
    fn summarize_means_and_buckets() {
        let records = vec![
            record("a", 1, 100.0, 100),
            record("b", 0, 50.0, 6000),
            record("c", 0, 0.0, 6000),
        ];
        let summary = summarize(&records, &DEFAULT_BUCKETS, serde_json::json!({}));
        assert_eq!(summary.n, 3);
        assert_eq!(summary.errors, 0);
        assert!((summary.es_mean - 50.0).abs() < 1e-12);
        assert!((summary.em_pct - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(summary.per_bucket.len(), 5);
        assert_eq!(summary.per_bucket[0].n, 1);
        assert_eq!(summary.per_bucket[1].n, 2);
        let bucket_total: usize = summary.per_bucket.iter().map(|b| b.n).sum();
        assert_eq!(bucket_total, summary.n);

        let empty = summarize(&[], &DEFAULT_BUCKETS, serde_json::json!({}));
        assert_eq!(empty.n, 0);
        assert_eq!(empty.em_pct, 0.0);
        assert_eq!(empty.per_bucket.len(), 5);
        assert!(empty.per_bucket.iter().all(|b| b.n == 0));
    }

    #[test]
    fn error_records_do_not_pollute_means() {
        let mut failed = record("x", 0, 0.0, 50);
        failed.error = Some("backend unreachable".to_string());
        let records = vec![record("a", 1, 100.0, 50), failed];
        let summary = summarize(&records, &DEFAULT_BUCKETS, serde_json::json!({}));
        assert_eq!(summary.n, 1);
        assert_eq!(summary.errors, 1);
        assert_eq!(summary.em_pct, 100.0);
        assert_eq!(summary.es_mean, 100.0);
    }

    #[test]
    fn reports_round_trip_and_csv_has_total_row() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![record("a", 1, 100.0, 100), record("b", 0, 30.0, 50000)];
        let path = dir.path().join("records.jsonl");
        write_records_jsonl(&records, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back: EvalRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back.sample_id, "a");
        assert_eq!(back.em, 1);

        let summary = summarize(&records, &DEFAULT_BUCKETS, serde_json::json!({"budget": 10240}));
        let json_path = dir.path().join("summary.json");
        write_summary_json(&summary, &json_path).unwrap();
        let loaded: EvalSummary =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(loaded.n, 2);
        assert_eq!(loaded.config["budget"], 10240);

        let csv_path = dir.path().join("summary.csv");
        write_summary_csv(&summary, &csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let last = text.lines().last().unwrap();
        assert!(last.starts_with("TOTAL,2,"));
        assert_eq!(text.lines().count(), 7); // header + 5 buckets + total
    }

    proptest! {
        #[test]
        fn prop_two_row_matches_full_matrix(a in ".{0,40}", b in ".{0,40}") {
            prop_assert_eq!(levenshtein(&a, &b), naive_levenshtein(&a, &b));
        }

        #[test]
        fn prop_metric_axioms(a in ".{0,25}", b in ".{0,25}", c in ".{0,25}") {
            prop_assert_eq!(levenshtein(&a, &a), 0);
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            let ab = levenshtein(&a, &b);
            let bc = levenshtein(&b, &c);
            let ac = levenshtein(&a, &c);
            prop_assert!(ac <= ab + bc);
        }

        #[test]
        fn prop_es_bounds_and_em_implication(a in ".{0,40}", b in ".{0,40}") {
            let es = edit_similarity(&a, &b);
            prop_assert!((0.0..=100.0).contains(&es));
            if exact_match(&a, &b) {
                prop_assert!((es - 100.0).abs() < 1e-12);
            }
            if (es - 100.0).abs() < 1e-12 {
                prop_assert!(exact_match(&a, &b));
            }
        }
    }
}
