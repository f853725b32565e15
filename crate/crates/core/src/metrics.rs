//! Ranking metrics under a single relevant record per query.
//!
//! Precision@k is the standard `hit/k`; Success@k (gold within the top k) is
//! reported next to it and equals Recall@k when each query has exactly one
//! relevant record. NDCG uses binary gain with a log2 discount, so the ideal
//! DCG is 1 and NDCG@k is `1/log2(rank+1)` for a hit within k.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_KS: [usize; 4] = [1, 3, 5, 10];

/// 1-based rank of `gold` in `ranked`.
pub fn gold_rank<S: AsRef<str>>(ranked: &[S], gold: &str) -> Option<usize> {
    ranked.iter().position(|r| r.as_ref() == gold).map(|i| i + 1)
}

pub fn reciprocal_rank<S: AsRef<str>>(ranked: &[S], gold: &str) -> f64 {
    gold_rank(ranked, gold).map_or(0.0, |r| 1.0 / r as f64)
}

/// Metrics at one cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub success: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mrr: f64,
    pub map: f64,
    pub queries: usize,
    pub queries_with_results: usize,
    pub cutoffs: Vec<CutoffMetrics>,
}

impl MetricReport {
    pub fn at(&self, k: usize) -> Option<&CutoffMetrics> {
        self.cutoffs.iter().find(|c| c.k == k)
    }
}

/// Per-query values, from the gold rank only (`None` when absent).
fn per_query(rank: Option<usize>, k: usize) -> [f64; 5] {
    match rank {
        Some(r) if r <= k => [
            1.0 / k as f64,
            1.0,
            1.0,
            1.0 / ((r + 1) as f64).log2(),
            1.0 / r as f64,
        ],
        _ => [0.0; 5],
    }
}

/// Average precision with one relevant document: precision at its rank.
fn average_precision(rank: Option<usize>) -> f64 {
    rank.map_or(0.0, |r| 1.0 / r as f64)
}

/// Builds a report from `(query id, ranked record ids)` runs.
pub fn compute_report<S: AsRef<str>>(
    runs: &[(String, Vec<S>)],
    gold: &HashMap<String, String>,
    ks: &[usize],
) -> Result<MetricReport> {
    let mut ranks = Vec::with_capacity(runs.len());
    let mut with_results = 0;
    for (qid, ranked) in runs {
        let g = gold.get(qid).ok_or_else(|| Error::MissingGold(qid.clone()))?;
        if !ranked.is_empty() {
            with_results += 1;
        }
        ranks.push(gold_rank(ranked, g));
    }
    Ok(report_from_ranks(&ranks, with_results, ks))
}

/// Builds a report from gold ranks directly.
pub fn report_from_ranks(ranks: &[Option<usize>], queries_with_results: usize, ks: &[usize]) -> MetricReport {
    let n = ranks.len();
    let mean = |sum: f64| if n == 0 { 0.0 } else { sum / n as f64 };
    let mut rr_sum = 0.0;
    let mut ap_sum = 0.0;
    for &r in ranks {
        rr_sum += r.map_or(0.0, |r| 1.0 / r as f64);
        ap_sum += average_precision(r);
    }
    let cutoffs = ks
        .iter()
        .map(|&k| {
            let mut s = [0.0; 5];
            for &r in ranks {
                let v = per_query(r, k);
                for i in 0..5 {
                    s[i] += v[i];
                }
            }
            CutoffMetrics {
                k,
                precision: mean(s[0]),
                recall: mean(s[1]),
                success: mean(s[2]),
                ndcg: mean(s[3]),
                mrr: mean(s[4]),
            }
        })
        .collect();
    MetricReport {
        mrr: mean(rr_sum),
        map: mean(ap_sum),
        queries: n,
        queries_with_results,
        cutoffs,
    }
}

/// Aligned plain-text rendering of one or more labeled reports.
pub fn format_table(rows: &[(String, &MetricReport)]) -> String {
    let mut out = String::new();
    let ks: Vec<usize> = rows
        .first()
        .map(|r| r.1.cutoffs.iter().map(|c| c.k).collect())
        .unwrap_or_default();
    let mut header = vec!["mode".to_string(), "MRR".into(), "MAP".into()];
    for k in &ks {
        header.push(format!("P@{k}"));
        header.push(format!("R@{k}"));
        header.push(format!("S@{k}"));
        header.push(format!("NDCG@{k}"));
        header.push(format!("MRR@{k}"));
    }
    let mut lines: Vec<Vec<String>> = vec![header];
    for (name, r) in rows {
        let mut l = vec![name.clone(), format!("{:.4}", r.mrr), format!("{:.4}", r.map)];
        for c in &r.cutoffs {
            for v in [c.precision, c.recall, c.success, c.ndcg, c.mrr] {
                l.push(format!("{v:.4}"));
            }
        }
        lines.push(l);
    }
    let widths: Vec<usize> = (0..lines[0].len())
        .map(|i| lines.iter().map(|l| l.get(i).map_or(0, String::len)).max().unwrap_or(0))
        .collect();
    for l in &lines {
        let cells: Vec<String> = l
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out.push_str("P@k = hits/k; S@k = share of queries with the gold record in the top k (equal to R@k here)\n");
    out
}

#[derive(Deserialize)]
struct RunLine {
    query_id: String,
    #[serde(default)]
    ranked: Option<Vec<String>>,
    #[serde(default)]
    candidates: Option<Vec<CandidateId>>,
}

#[derive(Deserialize)]
struct CandidateId {
    id: String,
}

/// Reads runs as JSON lines with `query_id` and either `ranked` (ids) or
/// `candidates` (objects with `id`, already in rank order).
pub fn read_runs(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<String>)>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RunLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let ids = match (r.ranked, r.candidates) {
            (Some(ids), _) => ids,
            (None, Some(c)) => c.into_iter().map(|c| c.id).collect(),
            (None, None) => Vec::new(),
        };
        out.push((r.query_id, ids));
    }
    Ok(out)
}

/// Reads gold labels from a CSV with `query_id,record_id` columns.
pub fn read_gold(path: impl AsRef<Path>) -> Result<HashMap<String, String>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("missing column '{name}'"),
            })
    };
    let (q, r) = (col("query_id")?, col("record_id")?);
    let mut gold = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        gold.insert(rec[q].trim().to_string(), rec[r].trim().to_string());
    }
    Ok(gold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gold_of(pairs: &[(&str, &str)]) -> HashMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn reciprocal_rank_examples() {
        assert_eq!(reciprocal_rank(&["g", "x"], "g"), 1.0);
        assert_eq!(reciprocal_rank(&["a", "b", "c", "g"], "g"), 0.25);
        assert_eq!(reciprocal_rank(&["a"], "g"), 0.0);
    }

    #[test]
    fn report_examples() {
        let runs = vec![
            ("q1".to_string(), vec!["g1", "x"]),
            ("q2".to_string(), vec!["x", "g2"]),
            ("q3".to_string(), vec!["x", "y", "z", "g3"]),
        ];
        let gold = gold_of(&[("q1", "g1"), ("q2", "g2"), ("q3", "g3")]);
        let r = compute_report(&runs, &gold, &DEFAULT_KS).unwrap();
        assert!((r.mrr - 1.75 / 3.0).abs() < 1e-12);
        assert_eq!(r.map, r.mrr);

        let runs = vec![("q".to_string(), vec!["a", "b", "g"])];
        let r = compute_report(&runs, &gold_of(&[("q", "g")]), &[10]).unwrap();
        assert!((r.at(10).unwrap().ndcg - 0.5).abs() < 1e-15);
    }

    #[test]
    fn perfect_run() {
        let runs: Vec<(String, Vec<&str>)> = (0..5).map(|i| (format!("q{i}"), vec!["g", "x", "y"])).collect();
        let gold: HashMap<String, String> = (0..5).map(|i| (format!("q{i}"), "g".to_string())).collect();
        let r = compute_report(&runs, &gold, &DEFAULT_KS).unwrap();
        assert_eq!(r.mrr, 1.0);
        for c in &r.cutoffs {
            assert_eq!(c.recall, 1.0);
            assert_eq!(c.success, 1.0);
            assert_eq!(c.ndcg, 1.0);
            assert_eq!(c.mrr, 1.0);
            assert_eq!(c.precision, 1.0 / c.k as f64);
        }
    }

    #[test]
    fn missing_gold_is_an_error() {
        let runs = vec![("q9".to_string(), vec!["a"])];
        assert!(matches!(compute_report(&runs, &HashMap::new(), &[1]), Err(Error::MissingGold(q)) if q == "q9"));
    }

    #[test]
    fn table_has_one_row_per_report() {
        let r = report_from_ranks(&[Some(1), None], 1, &DEFAULT_KS);
        let t = format_table(&[("hybrid".to_string(), &r)]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().nth(1).unwrap().starts_with("hybrid"));
    }

    #[test]
    fn file_readers() {
        let dir = tempfile::tempdir().unwrap();
        let runs = dir.path().join("runs.jsonl");
        std::fs::write(
            &runs,
            "{\"query_id\":\"a\",\"ranked\":[\"r1\",\"r2\"]}\n{\"query_id\":\"b\",\"candidates\":[{\"id\":\"r3\",\"rank\":1}]}\n",
        )
        .unwrap();
        let gold = dir.path().join("gold.csv");
        std::fs::write(&gold, "query_id,record_id\na,r2\nb,r3\n").unwrap();
        let r = compute_report(&read_runs(&runs).unwrap(), &read_gold(&gold).unwrap(), &[1]).unwrap();
        assert!((r.mrr - 0.75).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn invariants(ranks in proptest::collection::vec(proptest::option::of(1usize..15), 1..40)) {
            let r = report_from_ranks(&ranks, ranks.len(), &DEFAULT_KS);
            prop_assert_eq!(r.map, r.mrr);
            let mut prev: Option<&CutoffMetrics> = None;
            for c in &r.cutoffs {
                prop_assert_eq!(c.recall, c.success);
                for v in [c.precision, c.recall, c.ndcg, c.mrr] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                if let Some(p) = prev {
                    prop_assert!(c.recall >= p.recall);
                    prop_assert!(c.mrr >= p.mrr);
                }
                prev = Some(c);
            }
        }
    }
}
