//! Scripted backends. All of them are pure functions of the request (and, for
//! the noisy oracle, its seed), so repeated calls are byte-identical.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cache::prompt_digest;
use super::{Backend, BackendError, Completion};
use crate::eval::Qrels;
use crate::parse::render_ranking;
use crate::prompt::{PromptKind, PromptRequest};

/// The sentence the noisy oracle emits when it "refuses".
pub const REFUSAL_TEXT: &str = "I'm sorry, I cannot rank these passages.";

fn ok(text: String) -> Result<Completion, BackendError> {
    Ok(Completion { text, attempt: 1 })
}

/// Answers `[1] > [2] > ... > [m]`, or `A` for pairwise prompts.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityOracle;

impl Backend for IdentityOracle {
    fn complete(&self, req: &PromptRequest) -> Result<Completion, BackendError> {
        match req.kind {
            PromptKind::Listwise => ok(render_ranking(&(1..=req.window_ids.len()).collect::<Vec<_>>())),
            PromptKind::Pairwise => ok("A".to_string()),
        }
    }
}

/// Answers `[m] > ... > [1]`, or `B` for pairwise prompts.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReverseOracle;

impl Backend for ReverseOracle {
    fn complete(&self, req: &PromptRequest) -> Result<Completion, BackendError> {
        match req.kind {
            PromptKind::Listwise => ok(render_ranking(&(1..=req.window_ids.len()).rev().collect::<Vec<_>>())),
            PromptKind::Pairwise => ok("B".to_string()),
        }
    }
}

/// Orders the window by (grade desc, current position asc) using the qrels.
/// Pairwise prompts get `A` unless passage B has a strictly higher grade.
#[derive(Debug, Clone)]
pub struct QrelsOracle {
    qrels: Arc<Qrels>,
}

impl QrelsOracle {
    pub fn new(qrels: Arc<Qrels>) -> Self {
        Self { qrels }
    }

    /// The 1-based identifiers of the window in oracle order.
    pub fn order(&self, req: &PromptRequest) -> Vec<usize> {
        let grades: Vec<u32> = req.window_ids.iter().map(|d| self.qrels.grade(&req.qid, d)).collect();
        let mut order: Vec<usize> = (1..=grades.len()).collect();
        order.sort_by(|&a, &b| grades[b - 1].cmp(&grades[a - 1]).then(a.cmp(&b)));
        order
    }

    fn answer(&self, req: &PromptRequest) -> String {
        match req.kind {
            PromptKind::Listwise => render_ranking(&self.order(req)),
            PromptKind::Pairwise => {
                if self.order(req).first() == Some(&2) {
                    "B".to_string()
                } else {
                    "A".to_string()
                }
            }
        }
    }
}

impl Backend for QrelsOracle {
    fn complete(&self, req: &PromptRequest) -> Result<Completion, BackendError> {
        ok(self.answer(req))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Omit the last identifier of the ranking.
    DropLast,
    /// Repeat the first identifier at the end of the ranking.
    DuplicateFirst,
    /// Answer with [`REFUSAL_TEXT`].
    Refusal,
}

const NOISE_KINDS: [NoiseKind; 3] = [NoiseKind::DropLast, NoiseKind::DuplicateFirst, NoiseKind::Refusal];

/// The qrels oracle, except that with probability `noise_rate` the answer is
/// corrupted. The random draw is seeded from `seed` and the prompt digest, so
/// a given (prompt, seed) pair always gets the same answer.
#[derive(Debug, Clone)]
pub struct NoisyOracle {
    inner: QrelsOracle,
    noise_rate: f64,
    seed: u64,
    forced: Option<NoiseKind>,
}

impl NoisyOracle {
    pub fn new(inner: QrelsOracle, noise_rate: f64, seed: u64, forced: Option<NoiseKind>) -> Self {
        Self {
            inner,
            noise_rate,
            seed,
            forced,
        }
    }

    /// The corruption applied to `req`, if any.
    pub fn noise_for(&self, req: &PromptRequest) -> Option<NoiseKind> {
        let digest = prompt_digest("", &req.system_text, &req.user_text);
        let mixed = u64::from_le_bytes(digest[..8].try_into().unwrap()) ^ self.seed;
        let mut rng = ChaCha8Rng::seed_from_u64(mixed);
        if rng.gen::<f64>() >= self.noise_rate {
            return None;
        }
        let drawn = NOISE_KINDS[rng.gen_range(0..NOISE_KINDS.len())];
        Some(self.forced.unwrap_or(drawn))
    }
}

impl Backend for NoisyOracle {
    fn complete(&self, req: &PromptRequest) -> Result<Completion, BackendError> {
        let Some(noise) = self.noise_for(req) else {
            return self.inner.complete(req);
        };
        if req.kind == PromptKind::Pairwise {
            return ok(REFUSAL_TEXT.to_string());
        }
        let mut order = self.inner.order(req);
        let text = match noise {
            NoiseKind::DropLast => {
                order.pop();
                render_ranking(&order)
            }
            NoiseKind::DuplicateFirst => {
                order.push(order[0]);
                render_ranking(&order)
            }
            NoiseKind::Refusal => REFUSAL_TEXT.to_string(),
        };
        ok(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Passage, Query};
    use crate::parse::{parse_pairwise, parse_ranking, Classification, Preference};
    use crate::prompt::PromptBuilder;

    fn listwise(ids: &[&str]) -> PromptRequest {
        let passages: Vec<_> = ids
            .iter()
            .map(|id| Passage::new(*id, format!("text of {id}")).unwrap())
            .collect();
        PromptBuilder::default()
            .listwise(&Query::new("q", "query").unwrap(), &passages)
            .unwrap()
    }

    fn pairwise(a: &str, b: &str) -> PromptRequest {
        PromptBuilder::default()
            .pairwise(
                &Query::new("q", "query").unwrap(),
                &Passage::new(a, "x").unwrap(),
                &Passage::new(b, "y").unwrap(),
            )
            .unwrap()
    }

    fn qrels(grades: &[(&str, u32)]) -> Arc<Qrels> {
        let mut q = Qrels::new();
        for (d, g) in grades {
            q.insert("q", *d, *g);
        }
        Arc::new(q)
    }

    #[test]
    fn identity_and_reverse() {
        let req = listwise(&["a", "b", "c"]);
        assert_eq!(IdentityOracle.complete(&req).unwrap().text, "[1] > [2] > [3]");
        assert_eq!(ReverseOracle.complete(&req).unwrap().text, "[3] > [2] > [1]");
        assert_eq!(IdentityOracle.complete(&pairwise("a", "b")).unwrap().text, "A");
        assert_eq!(ReverseOracle.complete(&pairwise("a", "b")).unwrap().text, "B");
    }

    #[test]
    fn qrels_oracle_sorts_by_grade() {
        let oracle = QrelsOracle::new(qrels(&[("a", 0), ("b", 3), ("c", 1)]));
        let req = listwise(&["a", "b", "c"]);
        assert_eq!(oracle.complete(&req).unwrap().text, "[2] > [3] > [1]");
    }

    #[test]
    fn qrels_oracle_ties_keep_position() {
        let oracle = QrelsOracle::new(qrels(&[("b", 1), ("c", 1)]));
        assert_eq!(
            oracle.complete(&listwise(&["a", "b", "c", "d"])).unwrap().text,
            "[2] > [3] > [1] > [4]"
        );
        let pw = |a, b| parse_pairwise(&oracle.complete(&pairwise(a, b)).unwrap().text);
        assert_eq!(pw("b", "c"), Preference::A);
        assert_eq!(pw("a", "b"), Preference::B);
        assert_eq!(pw("b", "a"), Preference::A);
    }

    #[test]
    fn noisy_forced_duplicate_is_repetition() {
        let oracle = NoisyOracle::new(
            QrelsOracle::new(qrels(&[("a", 1)])),
            1.0,
            42,
            Some(NoiseKind::DuplicateFirst),
        );
        let text = oracle.complete(&listwise(&["a", "b", "c"])).unwrap().text;
        assert_eq!(parse_ranking(&text, 3).classification, Classification::Repetition);
    }

    #[test]
    fn noisy_kinds_classify_as_malformed() {
        let req = listwise(&["a", "b", "c"]);
        let inner = QrelsOracle::new(qrels(&[]));
        let expect = [
            (NoiseKind::DropLast, Classification::Missing),
            (NoiseKind::DuplicateFirst, Classification::Repetition),
            (NoiseKind::Refusal, Classification::WrongFormat),
        ];
        for (kind, class) in expect {
            let oracle = NoisyOracle::new(inner.clone(), 1.0, 1, Some(kind));
            let text = oracle.complete(&req).unwrap().text;
            assert_eq!(parse_ranking(&text, 3).classification, class, "{kind:?}");
        }
        let oracle = NoisyOracle::new(inner, 1.0, 1, None);
        assert_eq!(
            parse_pairwise(&oracle.complete(&pairwise("a", "b")).unwrap().text),
            Preference::Unparseable
        );
    }

    #[test]
    fn noisy_zero_rate_is_clean() {
        let oracle = NoisyOracle::new(QrelsOracle::new(qrels(&[("c", 2)])), 0.0, 9, None);
        assert_eq!(
            oracle.complete(&listwise(&["a", "b", "c"])).unwrap().text,
            "[3] > [1] > [2]"
        );
    }

    #[test]
    fn noisy_is_repeatable() {
        let oracle = NoisyOracle::new(QrelsOracle::new(qrels(&[])), 0.5, 3, None);
        for i in 0..50 {
            let req = listwise(&[&format!("x{i}"), "y"]);
            assert_eq!(oracle.complete(&req).unwrap(), oracle.complete(&req).unwrap());
        }
    }
}
