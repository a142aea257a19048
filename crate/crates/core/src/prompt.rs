//! Listwise and pairwise prompt rendering.
//!
//! The listwise user message is the fixed RankGPT-style template with the
//! example answer `[4] > [2]`, rendered as
//!
//! ```text
//! I will provide you with {num} passages, each indicated by a numerical identifier []. Rank the passages based on their relevance to the search query: {query}.
//!
//! [1] {passage 1}
//! ...
//! [{num}] {passage {num}}
//!
//! Search Query: {query}.
//!
//! Rank the {num} passages above based on their relevance to the search query. All the passages should be included and listed using identifiers, in descending order of relevance. The output format should be [] > [], e.g., [4] > [2]. Only respond with the ranking results, do not say any word or explain.
//! ```
//!
//! The pairwise template is frozen here:
//!
//! ```text
//! Given the search query: {query}.
//!
//! Which of the following two passages is more relevant to the search query?
//!
//! Passage A: {passage a}
//!
//! Passage B: {passage b}
//!
//! Respond with a single letter, A or B, naming the more relevant passage. Do not say any other word or explain.
//! ```
//!
//! Every passage (and the query) goes through [`sanitize_passage`] before
//! rendering, and passages are cut to `max_passage_words` whitespace words.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Passage, Query};

/// Vicuna's default system description.
pub const VICUNA_SYSTEM_TEXT: &str = "A chat between a curious user and an artificial intelligence assistant. The assistant gives helpful, detailed, and polite answers to the user's questions.";

pub const DEFAULT_MAX_PASSAGE_WORDS: usize = 300;
pub const DEFAULT_MAX_WINDOW: usize = 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("empty passage window")]
    EmptyWindow,
    #[error("window of {got} passages exceeds the limit of {limit}")]
    WindowTooLarge { got: usize, limit: usize },
    #[error("passage `{0}` appears twice in the window")]
    DuplicatePassage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Listwise,
    Pairwise,
}

/// One model interaction. Identifier `[i]` in `user_text` refers to `window_ids[i - 1]`;
/// for pairwise prompts `A` is `window_ids[0]` and `B` is `window_ids[1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub qid: String,
    pub kind: PromptKind,
    pub system_text: String,
    pub user_text: String,
    pub window_ids: Vec<String>,
    pub model_tag: String,
    pub max_passage_words: usize,
}

// Mojibake produced by decoding UTF-8 as Windows-1252 / Latin-1. Every
// replacement is strictly shorter in bytes than its pattern.
const MOJIBAKE_LEADS: [char; 4] = ['\u{feff}', 'â', 'Ã', 'Â'];

const MOJIBAKE_TABLE: &[(&str, &str)] = &[
    ("\u{feff}", ""),
    ("â€™", "\u{2019}"),
    ("â€˜", "\u{2018}"),
    ("â€œ", "\u{201c}"),
    ("â€\u{9d}", "\u{201d}"),
    ("â€“", "\u{2013}"),
    ("â€”", "\u{2014}"),
    ("â€¦", "\u{2026}"),
    ("â€¢", "\u{2022}"),
    ("â‚¬", "\u{20ac}"),
    ("â„¢", "\u{2122}"),
    ("Ã©", "é"),
    ("Ã¨", "è"),
    ("Ãª", "ê"),
    ("Ã«", "ë"),
    ("Ã¡", "á"),
    ("Ã\u{a0}", "à"),
    ("Ã¢", "â"),
    ("Ã¤", "ä"),
    ("Ã£", "ã"),
    ("Ã¥", "å"),
    ("Ã¦", "æ"),
    ("Ã§", "ç"),
    ("Ã\u{ad}", "í"),
    ("Ã¬", "ì"),
    ("Ã®", "î"),
    ("Ã¯", "ï"),
    ("Ã±", "ñ"),
    ("Ã³", "ó"),
    ("Ã²", "ò"),
    ("Ã´", "ô"),
    ("Ã¶", "ö"),
    ("Ãµ", "õ"),
    ("Ã¸", "ø"),
    ("Ãº", "ú"),
    ("Ã¹", "ù"),
    ("Ã»", "û"),
    ("Ã¼", "ü"),
    ("Ã½", "ý"),
    ("ÃŸ", "ß"),
    ("Ã‰", "É"),
    ("Ã€", "À"),
    ("Ã‡", "Ç"),
    ("Ã–", "Ö"),
    ("Ãœ", "Ü"),
    ("Ã„", "Ä"),
    ("Ã‘", "Ñ"),
    ("Â\u{a0}", "\u{a0}"),
    ("Â°", "°"),
    ("Â£", "£"),
    ("Â§", "§"),
    ("Â©", "©"),
    ("Â®", "®"),
    ("Â±", "±"),
    ("Â´", "´"),
    ("Âµ", "µ"),
    ("Â·", "·"),
    ("Â½", "½"),
    ("Â¼", "¼"),
    ("Â¾", "¾"),
    ("Â¿", "¿"),
    ("Â¡", "¡"),
    ("Â«", "«"),
    ("Â»", "»"),
];

static BRACKET_REF: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[([0-9]+)\]").unwrap());

/// Repairs the mojibake sequences in [`MOJIBAKE_TABLE`] until none remain.
pub fn fix_mojibake(text: &str) -> String {
    if !text.contains(MOJIBAKE_LEADS) {
        return text.to_string();
    }
    let mut current = text.to_string();
    loop {
        let mut next = current.clone();
        for (bad, good) in MOJIBAKE_TABLE {
            if next.contains(bad) {
                next = next.replace(bad, good);
            }
        }
        if next == current {
            return current;
        }
        current = next;
    }
}

/// Normalizes mojibake, then rewrites every `[k]` reference (k an integer) to `(k)`.
/// Idempotent.
pub fn sanitize_passage(text: &str) -> String {
    let fixed = fix_mojibake(text);
    if !fixed.contains('[') {
        return fixed;
    }
    BRACKET_REF.replace_all(&fixed, "($1)").into_owned()
}

/// Keeps the first `max_words` whitespace-delimited words, joined by single spaces.
pub fn truncate_words(text: &str, max_words: usize) -> String {
    text.split_whitespace().take(max_words).collect::<Vec<_>>().join(" ")
}

/// Renders [`PromptRequest`]s for one backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBuilder {
    pub model_tag: String,
    pub max_passage_words: usize,
    pub max_window: usize,
}

impl Default for PromptBuilder {
    fn default() -> Self {
        Self {
            model_tag: String::new(),
            max_passage_words: DEFAULT_MAX_PASSAGE_WORDS,
            max_window: DEFAULT_MAX_WINDOW,
        }
    }
}

impl PromptBuilder {
    pub fn new(model_tag: impl Into<String>) -> Self {
        Self {
            model_tag: model_tag.into(),
            ..Self::default()
        }
    }

    pub fn with_max_passage_words(mut self, words: usize) -> Self {
        self.max_passage_words = words;
        self
    }

    pub fn with_max_window(mut self, window: usize) -> Self {
        self.max_window = window;
        self
    }

    fn render_passage(&self, p: &Passage) -> String {
        truncate_words(&sanitize_passage(&p.text), self.max_passage_words)
    }

    pub fn listwise(&self, query: &Query, passages: &[Passage]) -> Result<PromptRequest, PromptError> {
        if passages.is_empty() {
            return Err(PromptError::EmptyWindow);
        }
        if passages.len() > self.max_window {
            return Err(PromptError::WindowTooLarge {
                got: passages.len(),
                limit: self.max_window,
            });
        }
        let mut seen = HashSet::new();
        if let Some(dup) = passages.iter().find(|p| !seen.insert(p.id.as_str())) {
            return Err(PromptError::DuplicatePassage(dup.id.clone()));
        }

        let num = passages.len();
        let q = sanitize_passage(&query.text);
        let mut user = format!(
            "I will provide you with {num} passages, each indicated by a numerical identifier []. \
             Rank the passages based on their relevance to the search query: {q}.\n\n"
        );
        for (i, p) in passages.iter().enumerate() {
            let _ = writeln!(user, "[{}] {}", i + 1, self.render_passage(p));
        }
        let _ = write!(
            user,
            "\nSearch Query: {q}.\n\n\
             Rank the {num} passages above based on their relevance to the search query. \
             All the passages should be included and listed using identifiers, in descending order of relevance. \
             The output format should be [] > [], e.g., [4] > [2]. \
             Only respond with the ranking results, do not say any word or explain."
        );

        Ok(PromptRequest {
            qid: query.qid.clone(),
            kind: PromptKind::Listwise,
            system_text: VICUNA_SYSTEM_TEXT.to_string(),
            user_text: user,
            window_ids: passages.iter().map(|p| p.id.clone()).collect(),
            model_tag: self.model_tag.clone(),
            max_passage_words: self.max_passage_words,
        })
    }

    pub fn pairwise(&self, query: &Query, a: &Passage, b: &Passage) -> Result<PromptRequest, PromptError> {
        if a.id == b.id {
            return Err(PromptError::DuplicatePassage(a.id.clone()));
        }
        let q = sanitize_passage(&query.text);
        let user = format!(
            "Given the search query: {q}.\n\n\
             Which of the following two passages is more relevant to the search query?\n\n\
             Passage A: {}\n\n\
             Passage B: {}\n\n\
             Respond with a single letter, A or B, naming the more relevant passage. \
             Do not say any other word or explain.",
            self.render_passage(a),
            self.render_passage(b),
        );
        Ok(PromptRequest {
            qid: query.qid.clone(),
            kind: PromptKind::Pairwise,
            system_text: VICUNA_SYSTEM_TEXT.to_string(),
            user_text: user,
            window_ids: vec![a.id.clone(), b.id.clone()],
            model_tag: self.model_tag.clone(),
            max_passage_words: self.max_passage_words,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(id: &str, text: &str) -> Passage {
        Passage::new(id, text).unwrap()
    }

    fn q(text: &str) -> Query {
        Query::new("q", text).unwrap()
    }

    #[test]
    fn sanitize_examples() {
        assert_eq!(sanitize_passage("see [12] for details"), "see (12) for details");
        assert_eq!(sanitize_passage("no refs here"), "no refs here");
        assert_eq!(sanitize_passage("[1][2]"), "(1)(2)");
        assert_eq!(sanitize_passage("[a] [ 3] [-1]"), "[a] [ 3] [-1]");
    }

    #[test]
    fn mojibake_repaired() {
        assert_eq!(sanitize_passage("donâ€™t"), "don\u{2019}t");
        assert_eq!(sanitize_passage("cafÃ©"), "café");
        // Doubly encoded: repaired to a fixpoint.
        assert_eq!(fix_mojibake("ÃÂ©"), "é");
    }

    #[test]
    fn mojibake_patterns_share_a_lead_character() {
        assert!(MOJIBAKE_TABLE.iter().all(|(bad, _)| bad.starts_with(MOJIBAKE_LEADS)));
    }

    #[test]
    fn mojibake_table_shrinks() {
        for (bad, good) in MOJIBAKE_TABLE {
            assert!(good.len() < bad.len(), "{bad:?} -> {good:?}");
        }
    }

    #[test]
    fn listwise_two_passages() {
        let req = PromptBuilder::default()
            .listwise(&q("q"), &[p("a", "alpha"), p("b", "beta")])
            .unwrap();
        assert!(req.user_text.contains("I will provide you with 2 passages"));
        assert!(req.user_text.contains("e.g., [4] > [2]"));
        assert_eq!(req.window_ids, vec!["a", "b"]);
        assert_eq!(req.system_text, VICUNA_SYSTEM_TEXT);
    }

    #[test]
    fn listwise_twenty_identifiers() {
        let passages: Vec<_> = (0..20).map(|i| p(&format!("d{i}"), &format!("text {i}"))).collect();
        let req = PromptBuilder::default().listwise(&q("q"), &passages).unwrap();
        let body = req.user_text.split("\n\nSearch Query:").next().unwrap();
        let ids: Vec<usize> = BRACKET_REF.captures_iter(body).map(|c| c[1].parse().unwrap()).collect();
        assert_eq!(ids, (1..=20).collect::<Vec<_>>());
        for i in 1..=20 {
            assert!(req.user_text.contains(&format!("\n[{i}] text {}\n", i - 1)));
        }
    }

    #[test]
    fn truncation_to_budget() {
        let long: String = (0..500).map(|i| format!("w{i} ")).collect();
        let req = PromptBuilder::default().listwise(&q("q"), &[p("a", &long)]).unwrap();
        let line = req.user_text.lines().find(|l| l.starts_with("[1] ")).unwrap();
        assert_eq!(line["[1] ".len()..].split_whitespace().count(), 300);
        assert!(line.ends_with("w299"));
    }

    #[test]
    fn listwise_errors() {
        let b = PromptBuilder::default();
        assert_eq!(b.listwise(&q("q"), &[]), Err(PromptError::EmptyWindow));
        let many: Vec<_> = (0..21).map(|i| p(&format!("d{i}"), "t")).collect();
        assert!(matches!(
            b.listwise(&q("q"), &many),
            Err(PromptError::WindowTooLarge { .. })
        ));
        assert_eq!(
            b.listwise(&q("q"), &[p("a", "x"), p("a", "y")]),
            Err(PromptError::DuplicatePassage("a".into()))
        );
    }

    #[test]
    fn passage_refs_never_leak() {
        let req = PromptBuilder::default()
            .listwise(&q("q"), &[p("a", "cites [7] and [8]"), p("b", "see [1]")])
            .unwrap();
        assert!(req.user_text.contains("[1] cites (7) and (8)\n"));
        assert!(req.user_text.contains("[2] see (1)\n"));
    }

    #[test]
    fn pairwise_contract() {
        let b = PromptBuilder::default();
        let (pa, pb) = (p("a", "first passage"), p("b", "second passage"));
        let ab = b.pairwise(&q("q"), &pa, &pb).unwrap();
        assert!(ab.user_text.contains("Passage A: first passage"));
        assert!(ab.user_text.contains("Passage B: second passage"));
        assert!(ab.user_text.contains("single letter, A or B"));
        assert_eq!(ab.window_ids, vec!["a", "b"]);
        assert!(b.pairwise(&q("q"), &pa, &pa).is_err());

        let ba = b.pairwise(&q("q"), &pb, &pa).unwrap();
        assert_ne!(ab.user_text, ba.user_text);
        let swapped = ba
            .user_text
            .replace("Passage A: second passage", "Passage A: first passage")
            .replacen("Passage B: first passage", "Passage B: second passage", 1);
        assert_eq!(swapped, ab.user_text);
    }
}
