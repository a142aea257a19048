//! Sliding-window listwise reranking.
//!
//! Windows are planned from the tail of the list toward its head: with
//! window `w` and stride `s` over `n` candidates the starts are `n - w`,
//! `n - w - s`, ... clamped at 0, each window spanning `[start, start + w)`
//! capped at `n`. Executing them in that order lets a relevant document from
//! the tail travel to the head in a single pass, because consecutive windows
//! overlap by `w - s`. The clamped final window may overlap its predecessor by
//! more than that (e.g. `n = 25, w = 20, s = 10` gives `[5, 25)` then `[0, 20)`).
//!
//! Each window is rewritten in place with the repaired permutation parsed from
//! the model's answer before the next window is prompted. Malformed answers
//! never fail a pass; they are counted per category.

use std::collections::HashMap;
use std::ops::Range;

use thiserror::Error;

use crate::client::{ClientError, ModelClient};
use crate::corpus::{Passage, PassageSource, Query};
use crate::parse::{parse_ranking, MalformedCounts};
use crate::prompt::{PromptBuilder, PromptError};
use crate::ranking::RankedList;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("window size must be at least 1")]
    ZeroWindow,
    #[error("stride {stride} must lie in 1..={window}")]
    BadStride { window: usize, stride: usize },
    #[error("cannot plan windows over an empty list")]
    EmptyList,
}

#[derive(Debug, Error)]
pub enum RerankError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("query {qid}: empty candidate list")]
    EmptyList { qid: String },
    #[error("query {qid}: pairwise reranking needs at least two candidates")]
    TooShort { qid: String },
    #[error("query {qid}: passage `{docid}` not found")]
    UnknownPassage { qid: String, docid: String },
    #[error("query {qid}: document `{docid}` appears twice in the candidate list")]
    DuplicateCandidate { qid: String, docid: String },
    #[error("query {qid}: {source}")]
    Prompt {
        qid: String,
        #[source]
        source: PromptError,
    },
    #[error("query {qid}, ranks {}..{}: {source}", window.start, window.end)]
    Backend {
        qid: String,
        window: Range<usize>,
        #[source]
        source: ClientError,
    },
    #[error("number of passes must be at least 1")]
    ZeroPasses,
}

/// Half-open rank intervals in execution order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub windows: Vec<Range<usize>>,
}

impl WindowPlan {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

pub fn plan_windows(n: usize, window: usize, stride: usize) -> Result<WindowPlan, PlanError> {
    if window == 0 {
        return Err(PlanError::ZeroWindow);
    }
    if stride == 0 || stride > window {
        return Err(PlanError::BadStride { window, stride });
    }
    if n == 0 {
        return Err(PlanError::EmptyList);
    }
    let mut windows = Vec::new();
    let mut start = n.saturating_sub(window);
    loop {
        windows.push(start..(start + window).min(n));
        if start == 0 {
            break;
        }
        start = start.saturating_sub(stride);
    }
    Ok(WindowPlan { windows })
}

/// Looks up every candidate's passage, failing on unknown or duplicate ids.
pub(crate) fn resolve_passages(
    list: &RankedList,
    source: &dyn PassageSource,
) -> Result<HashMap<String, Passage>, RerankError> {
    let mut out = HashMap::with_capacity(list.len());
    for id in list.ids() {
        let passage = source.passage(id).ok_or_else(|| RerankError::UnknownPassage {
            qid: list.qid.clone(),
            docid: id.to_string(),
        })?;
        if out.insert(id.to_string(), passage).is_some() {
            return Err(RerankError::DuplicateCandidate {
                qid: list.qid.clone(),
                docid: id.to_string(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassStats {
    pub requests: usize,
    pub malformed: MalformedCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassOutcome {
    pub list: RankedList,
    pub stats: PassStats,
}

/// Snapshots `0..=passes`; snapshot 0 is the input list.
#[derive(Debug, Clone, PartialEq)]
pub struct Progressive {
    pub snapshots: Vec<RankedList>,
    pub passes: Vec<PassStats>,
}

pub struct ListwiseReranker<'a> {
    client: &'a ModelClient,
    prompts: PromptBuilder,
    window: usize,
    stride: usize,
}

impl<'a> ListwiseReranker<'a> {
    pub fn new(client: &'a ModelClient, window: usize, stride: usize) -> Result<Self, PlanError> {
        plan_windows(1, window, stride)?;
        Ok(Self {
            client,
            prompts: PromptBuilder::new(client.model()).with_max_window(window),
            window,
            stride,
        })
    }

    pub fn with_max_passage_words(mut self, words: usize) -> Self {
        self.prompts = self.prompts.with_max_passage_words(words);
        self
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// One back-to-front pass. The output holds exactly the input ids, with
    /// synthetic scores `n, ..., 1`.
    pub fn rerank_pass(
        &self,
        query: &Query,
        list: &RankedList,
        source: &dyn PassageSource,
    ) -> Result<PassOutcome, RerankError> {
        if list.is_empty() {
            return Err(RerankError::EmptyList { qid: list.qid.clone() });
        }
        let passages = resolve_passages(list, source)?;
        let plan = plan_windows(list.len(), self.window, self.stride)?;
        let mut order: Vec<String> = list.ids().map(str::to_string).collect();
        let mut stats = PassStats::default();

        for range in plan.windows {
            let window: Vec<Passage> = order[range.clone()].iter().map(|id| passages[id].clone()).collect();
            let req = self
                .prompts
                .listwise(query, &window)
                .map_err(|source| RerankError::Prompt {
                    qid: list.qid.clone(),
                    source,
                })?;
            let resp = self.client.send(&req).map_err(|source| RerankError::Backend {
                qid: list.qid.clone(),
                window: range.clone(),
                source,
            })?;
            stats.requests += 1;
            let parsed = parse_ranking(&resp.text, window.len());
            stats.malformed.record(parsed.classification);
            let rewritten: Vec<String> = parsed.repaired.iter().map(|&k| window[k - 1].id.clone()).collect();
            order.splice(range, rewritten);
        }

        let mut out = RankedList::from_ids(list.qid.clone(), order, "listwise");
        out.provenance = "listwise".to_string();
        Ok(PassOutcome { list: out, stats })
    }

    /// Applies `passes` consecutive passes, keeping every intermediate list.
    pub fn progressive_rerank(
        &self,
        query: &Query,
        list: &RankedList,
        source: &dyn PassageSource,
        passes: usize,
    ) -> Result<Progressive, RerankError> {
        if passes == 0 {
            return Err(RerankError::ZeroPasses);
        }
        let mut snapshots = vec![list.clone()];
        let mut stats = Vec::with_capacity(passes);
        for pass in 1..=passes {
            let outcome = self.rerank_pass(query, snapshots.last().unwrap(), source)?;
            let mut next = outcome.list;
            next.provenance = format!("listwise.pass{pass}");
            snapshots.push(next);
            stats.push(outcome.stats);
        }
        Ok(Progressive {
            snapshots,
            passes: stats,
        })
    }
}
