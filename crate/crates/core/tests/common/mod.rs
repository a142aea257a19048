//! Independent reference implementations and synthetic data shared by the
//! integration tests. Nothing here calls into the metric or scheduling code
//! it is used to check.

#![allow(dead_code)]

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// DCG with the discount written as ln(2)/ln(rank+1).
fn dcg(grades: &[u32]) -> f64 {
    grades
        .iter()
        .enumerate()
        .map(|(i, &g)| g as f64 * std::f64::consts::LN_2 / ((i + 2) as f64).ln())
        .sum()
}

/// nDCG@k; the ideal ranking is found by repeatedly picking the largest remaining grade.
pub fn ndcg_oracle(ranking: &[&str], judged: &HashMap<String, u32>, k: usize) -> f64 {
    let mut pool: Vec<u32> = judged.values().copied().collect();
    let mut ideal = Vec::new();
    while ideal.len() < k && !pool.is_empty() {
        let (idx, _) = pool.iter().enumerate().max_by_key(|(_, g)| **g).unwrap();
        ideal.push(pool.swap_remove(idx));
    }
    let idcg = dcg(&ideal);
    if idcg == 0.0 {
        return 0.0;
    }
    let got: Vec<u32> = ranking.iter().take(k).map(|d| *judged.get(*d).unwrap_or(&0)).collect();
    dcg(&got) / idcg
}

/// AP@k computed from explicit prefix counts; `None` when nothing is relevant.
pub fn ap_oracle(ranking: &[&str], judged: &HashMap<String, u32>, k: usize, threshold: u32) -> Option<f64> {
    let rel = |d: &str| judged.get(d).is_some_and(|&g| g >= threshold);
    let r = judged.values().filter(|&&g| g >= threshold).count();
    if r == 0 {
        return None;
    }
    let top = &ranking[..ranking.len().min(k)];
    let mut sum = 0.0;
    for i in 0..top.len() {
        if rel(top[i]) {
            let hits = top[..=i].iter().filter(|d| rel(d)).count();
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / r as f64)
}

/// Best nDCG@k reachable by reordering `candidates` (judgments outside the
/// candidate set still count toward the ideal).
pub fn candidate_ideal_ndcg(candidates: &[&str], judged: &HashMap<String, u32>, k: usize) -> f64 {
    let mut sorted: Vec<&str> = candidates.to_vec();
    sorted.sort_by_key(|d| std::cmp::Reverse(*judged.get(*d).unwrap_or(&0)));
    ndcg_oracle(&sorted, judged, k)
}

/// Two-sided 99% t critical value for two degrees of freedom, in closed form.
pub fn t99_df2() -> f64 {
    let p: f64 = 0.995;
    (2.0 * p - 1.0) / (2.0 * p * (1.0 - p)).sqrt()
}

/// Half-width of the textbook 99% CI for three values.
pub fn ci99_triple(v: [f64; 3]) -> f64 {
    let mean = (v[0] + v[1] + v[2]) / 3.0;
    let ss: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
    let sd = (ss / 2.0).sqrt();
    t99_df2() * sd / 3f64.sqrt()
}

/// Windows containing each rank position, from the sliding rule written out directly.
pub fn window_coverage(n: usize, w: usize, s: usize) -> Vec<usize> {
    let mut cover = vec![0; n];
    let mut start = n as i64 - w as i64;
    loop {
        let lo = start.max(0) as usize;
        for c in cover.iter_mut().take((lo + w).min(n)).skip(lo) {
            *c += 1;
        }
        if lo == 0 {
            break;
        }
        start -= s as i64;
    }
    cover
}

/// A random corpus where every passage and query shares the token `common`,
/// so BM25 returns every passage for every query.
pub struct Synthetic {
    pub passages: Vec<(String, String)>,
    pub queries: Vec<(String, String)>,
    pub qrels: Vec<(String, String, u32)>,
}

impl Synthetic {
    pub fn generate(n_queries: usize, n_passages: usize, judged_per_query: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab: Vec<String> = (0..400).map(|i| format!("w{i}")).collect();
        let passages: Vec<(String, String)> = (0..n_passages)
            .map(|i| {
                let len = rng.gen_range(8..40);
                let mut text = String::from("common");
                for _ in 0..len {
                    text.push(' ');
                    text.push_str(vocab.choose(&mut rng).unwrap());
                }
                (format!("doc{i}"), text)
            })
            .collect();
        let queries: Vec<(String, String)> = (0..n_queries)
            .map(|i| {
                let words: Vec<&str> = (0..3).map(|_| vocab.choose(&mut rng).unwrap().as_str()).collect();
                (format!("q{i}"), format!("common {}", words.join(" ")))
            })
            .collect();
        let mut qrels = Vec::new();
        for (qid, _) in &queries {
            let picked: Vec<&(String, String)> = passages.choose_multiple(&mut rng, judged_per_query).collect();
            for (j, (docid, _)) in picked.into_iter().enumerate() {
                // guarantee at least one relevant document per query
                let grade = if j == 0 {
                    rng.gen_range(1..=3)
                } else {
                    rng.gen_range(0..=3)
                };
                qrels.push((qid.clone(), docid.clone(), grade));
            }
        }
        Self {
            passages,
            queries,
            qrels,
        }
    }

    pub fn judged(&self) -> HashMap<String, HashMap<String, u32>> {
        let mut out: HashMap<String, HashMap<String, u32>> = HashMap::new();
        for (q, d, g) in &self.qrels {
            out.entry(q.clone()).or_default().insert(d.clone(), *g);
        }
        out
    }

    pub fn passage_map(&self) -> HashMap<String, String> {
        self.passages.iter().cloned().collect()
    }

    /// Writes `corpus.jsonl`, `queries.tsv` and `qrels.txt` into `dir`.
    pub fn write(&self, dir: &Path) {
        let mut corpus = String::new();
        for (id, text) in &self.passages {
            writeln!(corpus, "{}", serde_json::json!({"id": id, "contents": text})).unwrap();
        }
        let mut queries = String::new();
        for (qid, text) in &self.queries {
            writeln!(queries, "{qid}\t{text}").unwrap();
        }
        let mut qrels = String::new();
        for (q, d, g) in &self.qrels {
            writeln!(qrels, "{q} 0 {d} {g}").unwrap();
        }
        std::fs::write(dir.join("corpus.jsonl"), corpus).unwrap();
        std::fs::write(dir.join("queries.tsv"), queries).unwrap();
        std::fs::write(dir.join("qrels.txt"), qrels).unwrap();
    }
}
