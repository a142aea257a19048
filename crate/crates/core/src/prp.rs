//! Pairwise sliding baseline: repeated backward bubble passes driven by
//! pairwise relevance prompts.
//!
//! A pass walks `i` from `n - 1` down to `1`, asks the model to compare the
//! entries at ranks `i - 1` (passage A) and `i` (passage B), and swaps them
//! when the answer is `B`. Unparseable answers keep the current order. After
//! `j` passes with a consistent judge the `j` best documents hold the top `j`
//! ranks.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::Serialize;

use crate::client::ModelClient;
use crate::corpus::{Passage, PassageSource, Query};
use crate::parse::{parse_pairwise, Preference};
use crate::prompt::PromptBuilder;
use crate::ranking::RankedList;
use crate::window::{resolve_passages, RerankError};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PrpStats {
    pub comparisons_total: u64,
    pub per_doc_prompt_counts: BTreeMap<String, u64>,
    pub passes_executed: u64,
    pub unparseable: u64,
}

impl PrpStats {
    /// Average number of prompts each document appeared in; 0 when no document was seen.
    pub fn mean_prompts_per_doc(&self) -> f64 {
        if self.per_doc_prompt_counts.is_empty() {
            return 0.0;
        }
        let total: u64 = self.per_doc_prompt_counts.values().sum();
        total as f64 / self.per_doc_prompt_counts.len() as f64
    }
}

/// One row of the per-pass stats table; counts are cumulative up to `pass`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrpPassRow {
    pub qid: String,
    pub pass: usize,
    pub comparisons: u64,
    pub mean_prompts_per_doc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrpOutcome {
    /// Snapshot 0 is the input; snapshot `p` is the list after pass `p`.
    pub snapshots: Vec<RankedList>,
    pub stats: PrpStats,
    pub rows: Vec<PrpPassRow>,
}

impl PrpOutcome {
    pub fn final_list(&self) -> &RankedList {
        self.snapshots.last().expect("at least the input snapshot")
    }
}

pub struct PrpReranker<'a> {
    client: &'a ModelClient,
    prompts: PromptBuilder,
}

impl<'a> PrpReranker<'a> {
    pub fn new(client: &'a ModelClient) -> Self {
        Self {
            client,
            prompts: PromptBuilder::new(client.model()),
        }
    }

    pub fn with_max_passage_words(mut self, words: usize) -> Self {
        self.prompts = self.prompts.with_max_passage_words(words);
        self
    }

    fn pass_with(
        &self,
        query: &Query,
        list: &RankedList,
        passages: &HashMap<String, Passage>,
        stats: &mut PrpStats,
    ) -> Result<RankedList, RerankError> {
        let mut order: Vec<String> = list.ids().map(str::to_string).collect();
        for i in (1..order.len()).rev() {
            let a = &passages[&order[i - 1]];
            let b = &passages[&order[i]];
            let req = self
                .prompts
                .pairwise(query, a, b)
                .map_err(|source| RerankError::Prompt {
                    qid: list.qid.clone(),
                    source,
                })?;
            let resp = self.client.send(&req).map_err(|source| RerankError::Backend {
                qid: list.qid.clone(),
                window: i - 1..i + 1,
                source,
            })?;
            stats.comparisons_total += 1;
            for id in [&a.id, &b.id] {
                *stats.per_doc_prompt_counts.entry(id.clone()).or_default() += 1;
            }
            match parse_pairwise(&resp.text) {
                Preference::B => order.swap(i - 1, i),
                Preference::A => {}
                Preference::Unparseable => stats.unparseable += 1,
            }
        }
        stats.passes_executed += 1;
        Ok(RankedList::from_ids(list.qid.clone(), order, "prp"))
    }

    /// A single backward pass of exactly `n - 1` comparisons.
    pub fn prp_sliding_pass(
        &self,
        query: &Query,
        list: &RankedList,
        source: &dyn PassageSource,
        stats: &mut PrpStats,
    ) -> Result<RankedList, RerankError> {
        if list.len() < 2 {
            return Err(RerankError::TooShort { qid: list.qid.clone() });
        }
        let passages = resolve_passages(list, source)?;
        self.pass_with(query, list, &passages, stats)
    }

    /// `passes` consecutive backward passes.
    pub fn prp_sliding(
        &self,
        query: &Query,
        list: &RankedList,
        source: &dyn PassageSource,
        passes: usize,
    ) -> Result<PrpOutcome, RerankError> {
        if passes == 0 {
            return Err(RerankError::ZeroPasses);
        }
        if list.len() < 2 {
            return Err(RerankError::TooShort { qid: list.qid.clone() });
        }
        let passages = resolve_passages(list, source)?;
        let mut stats = PrpStats::default();
        let mut snapshots = vec![list.clone()];
        let mut rows = Vec::with_capacity(passes);
        for pass in 1..=passes {
            let mut next = self.pass_with(query, snapshots.last().unwrap(), &passages, &mut stats)?;
            next.provenance = format!("prp.pass{pass}");
            snapshots.push(next);
            rows.push(PrpPassRow {
                qid: list.qid.clone(),
                pass,
                comparisons: stats.comparisons_total,
                mean_prompts_per_doc: stats.mean_prompts_per_doc(),
            });
        }
        Ok(PrpOutcome { snapshots, stats, rows })
    }
}

/// Writes `qid,pass,comparisons,mean_prompts_per_doc`.
pub fn write_prp_stats_csv<W: Write>(writer: W, rows: &[PrpPassRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["qid", "pass", "comparisons", "mean_prompts_per_doc"])?;
    for r in rows {
        w.write_record([
            r.qid.clone(),
            r.pass.to_string(),
            r.comparisons.to_string(),
            format!("{:.4}", r.mean_prompts_per_doc),
        ])?;
    }
    w.flush()?;
    Ok(())
}
