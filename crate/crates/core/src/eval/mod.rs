//! IR effectiveness metrics over TREC-style runs and qrels.
//!
//! - nDCG@k uses linear gain and a `log2(i + 1)` discount; the ideal DCG is
//!   computed from every judged document of the query.
//! - AP@k binarizes grades at a threshold (2 for graded DL-style qrels, 1 for
//!   binary ones) and divides by the total number of relevant documents.
//! - Unjudged documents count as grade 0.
//!
//! Queries present in a run but absent from the qrels are excluded and
//! listed in [`MetricReport::excluded`].

mod report;
mod trec;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::ranking::RankedList;

pub use report::{format_table, write_metrics_csv, MetricRow};
pub use trec::{read_qrels, read_run, write_qrels, write_run};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("no reports to aggregate")]
    NoReports,
    #[error("reports cover different query sets (report {index} differs from report 0)")]
    MismatchedQueries { index: usize },
    #[error("cutoff must be at least 1")]
    ZeroCutoff,
}

/// Graded relevance judgments keyed by query id, then document id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrels {
    judgments: BTreeMap<String, HashMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a judgment, returning the previous grade if one existed.
    pub fn insert(&mut self, qid: impl Into<String>, docid: impl Into<String>, grade: u32) -> Option<u32> {
        self.judgments
            .entry(qid.into())
            .or_default()
            .insert(docid.into(), grade)
    }

    /// Grade of a document; unjudged documents are 0.
    pub fn grade(&self, qid: &str, docid: &str) -> u32 {
        self.judgments.get(qid).and_then(|m| m.get(docid)).copied().unwrap_or(0)
    }

    pub fn judged(&self, qid: &str) -> Option<&HashMap<String, u32>> {
        self.judgments.get(qid)
    }

    pub fn contains_query(&self, qid: &str) -> bool {
        self.judgments.contains_key(qid)
    }

    pub fn qids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.judgments
            .iter()
            .flat_map(|(q, docs)| docs.iter().map(move |(d, g)| (q.as_str(), d.as_str(), *g)))
    }

    pub fn max_grade(&self) -> u32 {
        self.iter().map(|(_, _, g)| g).max().unwrap_or(0)
    }

    /// 2 for graded qrels (any grade >= 2), 1 for binary ones.
    pub fn default_relevance_threshold(&self) -> u32 {
        if self.max_grade() >= 2 {
            2
        } else {
            1
        }
    }
}

/// Per-query values and their mean for one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    /// Half-width of the 99% confidence interval over runs, when aggregated from several.
    pub ci99: Option<f64>,
    /// Queries skipped: absent from the qrels, or (for AP) without relevant documents.
    pub excluded: Vec<String>,
}

impl MetricReport {
    fn from_per_query(metric: String, per_query: BTreeMap<String, f64>, excluded: Vec<String>) -> Self {
        if !excluded.is_empty() {
            log::warn!("{metric}: {} queries excluded from evaluation", excluded.len());
        }
        let mean = if per_query.is_empty() {
            0.0
        } else {
            per_query.values().sum::<f64>() / per_query.len() as f64
        };
        Self {
            metric,
            per_query,
            mean,
            ci99: None,
            excluded,
        }
    }
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades
        .enumerate()
        .map(|(i, g)| g as f64 / ((i + 2) as f64).log2())
        .sum()
}

/// nDCG@k of a single ranking given the query's judgments.
pub fn ndcg_of<'a>(ranking: impl Iterator<Item = &'a str>, judged: &HashMap<String, u32>, k: usize) -> f64 {
    let mut ideal: Vec<u32> = judged.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    if idcg == 0.0 {
        return 0.0;
    }
    let actual = dcg(ranking.take(k).map(|d| judged.get(d).copied().unwrap_or(0)));
    actual / idcg
}

/// AP@k of a single ranking; `None` when the query has no relevant documents.
pub fn average_precision_of<'a>(
    ranking: impl Iterator<Item = &'a str>,
    judged: &HashMap<String, u32>,
    k: usize,
    threshold: u32,
) -> Option<f64> {
    let total_relevant = judged.values().filter(|&&g| g >= threshold).count();
    if total_relevant == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, d) in ranking.take(k).enumerate() {
        if judged.get(d).is_some_and(|&g| g >= threshold) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / total_relevant as f64)
}

pub fn ndcg_at(runs: &[RankedList], qrels: &Qrels, k: usize) -> Result<MetricReport, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroCutoff);
    }
    let mut per_query = BTreeMap::new();
    let mut excluded = Vec::new();
    for list in runs {
        match qrels.judged(&list.qid) {
            Some(judged) => {
                per_query.insert(list.qid.clone(), ndcg_of(list.ids(), judged, k));
            }
            None => excluded.push(list.qid.clone()),
        }
    }
    Ok(MetricReport::from_per_query(format!("ndcg@{k}"), per_query, excluded))
}

/// MAP@k with documents of grade `>= threshold` counted as relevant.
pub fn map_at(runs: &[RankedList], qrels: &Qrels, k: usize, threshold: u32) -> Result<MetricReport, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroCutoff);
    }
    let mut per_query = BTreeMap::new();
    let mut excluded = Vec::new();
    for list in runs {
        let ap = qrels
            .judged(&list.qid)
            .and_then(|judged| average_precision_of(list.ids(), judged, k, threshold));
        match ap {
            Some(ap) => {
                per_query.insert(list.qid.clone(), ap);
            }
            None => excluded.push(list.qid.clone()),
        }
    }
    Ok(MetricReport::from_per_query(format!("map@{k}"), per_query, excluded))
}

/// Two-sided 99% Student-t critical value with `df` degrees of freedom.
pub fn t_critical_99(df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df)
        .expect("degrees of freedom must be positive")
        .inverse_cdf(0.995)
}

/// Mean and 99% CI half-width of run-level values; the CI is `None` for a single run.
pub fn mean_ci99(values: &[f64]) -> (f64, Option<f64>) {
    let r = values.len();
    let mean = values.iter().sum::<f64>() / r as f64;
    if r < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
    let half = t_critical_99((r - 1) as f64) * var.sqrt() / (r as f64).sqrt();
    (mean, Some(half))
}

/// Combines reports of the same metric from repeated runs over the same queries.
///
/// The mean is the mean of run means, the CI comes from the spread of run
/// means, and `per_query` holds the per-query average across runs.
pub fn aggregate_runs(reports: &[MetricReport]) -> Result<MetricReport, EvalError> {
    let first = reports.first().ok_or(EvalError::NoReports)?;
    let keys: BTreeSet<&String> = first.per_query.keys().collect();
    for (index, r) in reports.iter().enumerate().skip(1) {
        if r.per_query.keys().collect::<BTreeSet<_>>() != keys {
            return Err(EvalError::MismatchedQueries { index });
        }
    }
    let means: Vec<f64> = reports.iter().map(|r| r.mean).collect();
    let (mean, ci99) = mean_ci99(&means);
    let per_query = keys
        .into_iter()
        .map(|q| {
            let avg = reports.iter().map(|r| r.per_query[q]).sum::<f64>() / reports.len() as f64;
            (q.clone(), avg)
        })
        .collect();
    let mut excluded: Vec<String> = reports.iter().flat_map(|r| r.excluded.iter().cloned()).collect();
    excluded.sort();
    excluded.dedup();
    Ok(MetricReport {
        metric: first.metric.clone(),
        per_query,
        mean,
        ci99,
        excluded,
    })
}
