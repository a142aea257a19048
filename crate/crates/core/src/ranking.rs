//! Per-query ranked candidate lists, the unit flowing between pipeline stages.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub docid: String,
    pub score: f64,
}

/// An ordered candidate list for one query. Position in `entries` is the rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub qid: String,
    pub entries: Vec<RankedEntry>,
    /// Stage tag, e.g. `bm25` or `listwise.pass2`.
    pub provenance: String,
}

impl RankedList {
    pub fn new(qid: impl Into<String>, provenance: impl Into<String>) -> Self {
        Self {
            qid: qid.into(),
            entries: Vec::new(),
            provenance: provenance.into(),
        }
    }

    /// Builds a list from ids in rank order, assigning synthetic scores `n, n-1, ..., 1`.
    pub fn from_ids<I, S>(qid: impl Into<String>, ids: I, provenance: impl Into<String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list = Self::new(qid, provenance);
        list.entries = ids
            .into_iter()
            .map(|id| RankedEntry {
                docid: id.into(),
                score: 0.0,
            })
            .collect();
        list.assign_synthetic_scores();
        list
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.docid.as_str())
    }

    pub fn truncate(&mut self, k: usize) {
        self.entries.truncate(k);
    }

    /// Overwrites scores with `n, n-1, ..., 1` so the order stays a valid run.
    pub fn assign_synthetic_scores(&mut self) {
        let n = self.entries.len();
        for (i, e) in self.entries.iter_mut().enumerate() {
            e.score = (n - i) as f64;
        }
    }

    /// Returns the first duplicated document id, if any.
    pub fn first_duplicate(&self) -> Option<&str> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        self.entries
            .iter()
            .find(|e| !seen.insert(e.docid.as_str()))
            .map(|e| e.docid.as_str())
    }
}
