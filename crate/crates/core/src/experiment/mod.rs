//! End-to-end experiments: first stage, optional candidate shuffling,
//! truncation, reranking, evaluation of every pass and aggregation over
//! shuffle seeds.
//!
//! Output directory layout:
//!
//! ```text
//! manifest.json           status, failed stage, config digest, seeds, backend, timings
//! first_stage.run         full-depth first-stage run (BM25 or the imported file)
//! <variant>/pass<p>.run   variant is `base` or `shuffle-<seed>`; pass 0 = reranker input
//! <variant>/prp_stats.csv pairwise reranker only
//! metrics.csv             nDCG@10 / MAP@100 per variant and pass
//! per_query.csv           per-query values behind metrics.csv
//! aggregate.csv           mean ± ci99 over shuffle seeds, per pass
//! malformed.csv           listwise answer classification counts per variant and pass
//! requests.csv            model requests per variant and pass
//! ```

mod verify;

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::example_seed;
use crate::client::{BackendConfig, BackendKind, ModelClient, ResponseCache};
use crate::corpus::{ingest_corpus, read_queries, CorpusIndex, Query};
use crate::eval::{
    aggregate_runs, map_at, ndcg_at, read_qrels, read_run, write_metrics_csv, write_run, MetricReport, MetricRow, Qrels,
};
use crate::parallel::map_ordered;
use crate::parse::{write_malformed_csv, MalformedCounts};
use crate::prompt::DEFAULT_MAX_PASSAGE_WORDS;
use crate::prp::{write_prp_stats_csv, PrpPassRow, PrpReranker};
use crate::ranking::RankedList;
use crate::window::{plan_windows, ListwiseReranker, PlanError, RerankError};

pub use verify::{compare_dirs, verify_determinism, verify_pair, DeterminismReport, Mismatch};

pub const NDCG_CUTOFF: usize = 10;
pub const MAP_CUTOFF: usize = 100;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config {path}: {reason}")]
    ConfigFile { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    FirstStage,
    Rerank,
    Evaluate,
    Write,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Load => "load",
            Stage::FirstStage => "first_stage",
            Stage::Rerank => "rerank",
            Stage::Evaluate => "evaluate",
            Stage::Write => "write",
        })
    }
}

fn at<E: std::error::Error + Send + Sync + 'static>(stage: Stage) -> impl FnOnce(E) -> ExperimentError {
    move |e| ExperimentError::Stage {
        stage,
        source: Box::new(e),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FirstStage {
    #[default]
    Bm25,
    Import {
        run: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RerankerKind {
    #[default]
    Listwise,
    Prp,
    None,
}

impl std::str::FromStr for RerankerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "listwise" => Ok(Self::Listwise),
            "prp" => Ok(Self::Prp),
            "none" => Ok(Self::None),
            other => Err(format!("unknown reranker `{other}`")),
        }
    }
}

/// Declarative experiment description, usually read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// JSONL corpus; ignored when `index` is set.
    pub corpus: Option<PathBuf>,
    /// Prebuilt index snapshot.
    pub index: Option<PathBuf>,
    pub queries: PathBuf,
    pub qrels: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub cache: Option<PathBuf>,
    pub first_stage: FirstStage,
    /// Retrieval depth of the BM25 first stage.
    pub first_stage_depth: usize,
    pub top_k: usize,
    pub reranker: RerankerKind,
    pub window: usize,
    pub stride: usize,
    pub passes: usize,
    /// Empty means no shuffled variants.
    pub shuffle_seeds: Vec<u64>,
    pub max_passage_words: usize,
    /// Grade at which MAP counts a document relevant; derived from the qrels when unset.
    pub relevance_threshold: Option<u32>,
    pub backend: BackendConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            index: None,
            queries: PathBuf::new(),
            qrels: None,
            output_dir: PathBuf::from("runs"),
            cache: None,
            first_stage: FirstStage::Bm25,
            first_stage_depth: 1000,
            top_k: 100,
            reranker: RerankerKind::Listwise,
            window: 20,
            stride: 10,
            passes: 1,
            shuffle_seeds: Vec::new(),
            max_passage_words: DEFAULT_MAX_PASSAGE_WORDS,
            relevance_threshold: None,
            backend: BackendConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML file; relative paths are taken relative to its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let file_err = |reason: String| ExperimentError::ConfigFile {
            path: path.to_path_buf(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| file_err(e.to_string()))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.corpus, &mut self.index, &mut self.qrels, &mut self.cache]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.queries);
        fix(&mut self.output_dir);
        if let FirstStage::Import { run } = &mut self.first_stage {
            fix(run);
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let invalid = |m: String| Err(ExperimentError::InvalidConfig(m));
        if self.corpus.is_none() && self.index.is_none() {
            return invalid("one of `corpus` or `index` is required".into());
        }
        if self.queries.as_os_str().is_empty() {
            return invalid("`queries` is required".into());
        }
        if self.top_k == 0 {
            return invalid("top_k must be at least 1".into());
        }
        if self.first_stage_depth < self.top_k {
            return invalid(format!(
                "first_stage_depth {} is below top_k {}",
                self.first_stage_depth, self.top_k
            ));
        }
        if self.reranker != RerankerKind::None && self.passes == 0 {
            return invalid("passes must be at least 1".into());
        }
        if self.reranker == RerankerKind::Listwise {
            if let Err(e @ (PlanError::ZeroWindow | PlanError::BadStride { .. })) =
                plan_windows(1, self.window, self.stride)
            {
                return invalid(e.to_string());
            }
        }
        if self.max_passage_words == 0 {
            return invalid("max_passage_words must be at least 1".into());
        }
        let distinct: BTreeSet<_> = self.shuffle_seeds.iter().collect();
        if distinct.len() != self.shuffle_seeds.len() {
            return invalid("shuffle seeds must be distinct".into());
        }
        if matches!(self.backend.kind, BackendKind::QrelsOracle | BackendKind::NoisyOracle) && self.qrels.is_none() {
            return invalid(format!("backend `{}` needs qrels", self.backend.kind.as_str()));
        }
        self.backend
            .validate()
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))
    }

    /// SHA-256 over the canonical JSON form of the config, output directory excluded.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Variant names in output order: `base`, then `shuffle-<seed>` per seed.
    pub fn variants(&self) -> Vec<Variant> {
        std::iter::once(Variant::Base)
            .chain(self.shuffle_seeds.iter().map(|&s| Variant::Shuffled(s)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Base,
    Shuffled(u64),
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Base => f.write_str("base"),
            Variant::Shuffled(seed) => write!(f, "shuffle-{seed}"),
        }
    }
}

/// Reranker input for one query: the top `k` of `first_stage`, shuffled when
/// the variant asks for it. Scores are kept for the base variant and replaced
/// by synthetic ones after shuffling.
pub fn candidates(first_stage: &RankedList, top_k: usize, variant: Variant) -> RankedList {
    let mut list = first_stage.clone();
    list.truncate(top_k);
    if let Variant::Shuffled(seed) = variant {
        let mut rng = ChaCha8Rng::seed_from_u64(example_seed(seed, &list.qid));
        list.entries.shuffle(&mut rng);
        list.assign_synthetic_scores();
        list.provenance = format!("shuffle-{seed}");
    }
    list
}

/// Everything read from disk before any model call.
pub struct Inputs {
    pub index: CorpusIndex,
    pub queries: Vec<Query>,
    pub qrels: Option<Arc<Qrels>>,
}

impl Inputs {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self, ExperimentError> {
        let index = load_index(cfg)?;
        let queries = read_queries(open(&cfg.queries)?).map_err(at(Stage::Load))?;
        let qrels = match &cfg.qrels {
            Some(p) => Some(Arc::new(read_qrels(open(p)?).map_err(at(Stage::Load))?)),
            None => None,
        };
        Ok(Self { index, queries, qrels })
    }
}

fn open(path: &Path) -> Result<BufReader<File>, ExperimentError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| ExperimentError::Stage {
            stage: Stage::Load,
            source: format!("{}: {e}", path.display()).into(),
        })
}

pub fn load_index(cfg: &ExperimentConfig) -> Result<CorpusIndex, ExperimentError> {
    match (&cfg.index, &cfg.corpus) {
        (Some(p), _) => CorpusIndex::load(open(p)?).map_err(at(Stage::Load)),
        (None, Some(p)) => ingest_corpus(open(p)?).map_err(at(Stage::Load)),
        (None, None) => Err(ExperimentError::InvalidConfig("no corpus or index".into())),
    }
}

/// First-stage lists in query order; queries missing from an imported run get an empty list.
pub fn first_stage_lists(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<Vec<RankedList>, ExperimentError> {
    match &cfg.first_stage {
        FirstStage::Bm25 => Ok(inputs
            .queries
            .iter()
            .map(|q| inputs.index.bm25_search(q, cfg.first_stage_depth))
            .collect()),
        FirstStage::Import { run } => {
            let lists = read_run(open(run)?).map_err(at(Stage::FirstStage))?;
            let mut by_qid: HashMap<String, RankedList> = lists.into_iter().map(|l| (l.qid.clone(), l)).collect();
            Ok(inputs
                .queries
                .iter()
                .map(|q| {
                    let mut l = by_qid
                        .remove(&q.qid)
                        .unwrap_or_else(|| RankedList::new(q.qid.clone(), "import"));
                    l.truncate(cfg.first_stage_depth);
                    l
                })
                .collect())
        }
    }
}

/// Builds the model client, attaching the response cache when configured.
pub fn build_client(cfg: &ExperimentConfig, qrels: Option<Arc<Qrels>>) -> Result<ModelClient, ExperimentError> {
    let client = ModelClient::from_config(&cfg.backend, qrels).map_err(at(Stage::Load))?;
    Ok(match &cfg.cache {
        Some(p) => client.with_cache(Arc::new(ResponseCache::open(p).map_err(at(Stage::Load))?)),
        None => client,
    })
}

/// Per-query reranking result: snapshots `0..=passes` plus accounting.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub snapshots: Vec<RankedList>,
    pub requests: Vec<u64>,
    pub malformed: Vec<MalformedCounts>,
    pub prp_rows: Vec<PrpPassRow>,
}

/// Reranks one candidate list. Lists too short for the reranker pass through
/// unchanged without model calls.
pub fn rerank_query(
    cfg: &ExperimentConfig,
    client: &ModelClient,
    index: &CorpusIndex,
    query: &Query,
    list: RankedList,
) -> Result<QueryOutcome, RerankError> {
    let passes = if cfg.reranker == RerankerKind::None {
        0
    } else {
        cfg.passes
    };
    let min_len = match cfg.reranker {
        RerankerKind::Prp => 2,
        _ => 1,
    };
    if passes == 0 || list.len() < min_len {
        if passes > 0 {
            log::warn!("query {}: {} candidates, skipping reranking", query.qid, list.len());
        }
        return Ok(QueryOutcome {
            snapshots: vec![list; passes + 1],
            requests: vec![0; passes],
            malformed: vec![MalformedCounts::default(); passes],
            prp_rows: Vec::new(),
        });
    }
    match cfg.reranker {
        RerankerKind::Listwise => {
            let r =
                ListwiseReranker::new(client, cfg.window, cfg.stride)?.with_max_passage_words(cfg.max_passage_words);
            let prog = r.progressive_rerank(query, &list, index, passes)?;
            Ok(QueryOutcome {
                requests: prog.passes.iter().map(|p| p.requests as u64).collect(),
                malformed: prog.passes.iter().map(|p| p.malformed).collect(),
                snapshots: prog.snapshots,
                prp_rows: Vec::new(),
            })
        }
        RerankerKind::Prp => {
            let r = PrpReranker::new(client).with_max_passage_words(cfg.max_passage_words);
            let out = r.prp_sliding(query, &list, index, passes)?;
            let per_pass = (list.len() - 1) as u64;
            Ok(QueryOutcome {
                requests: vec![per_pass; passes],
                malformed: vec![MalformedCounts::default(); passes],
                snapshots: out.snapshots,
                prp_rows: out.rows,
            })
        }
        RerankerKind::None => unreachable!("handled above"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestRow {
    pub variant: String,
    pub pass: usize,
    pub queries: usize,
    pub requests: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: String,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
    pub config_digest: String,
    pub shuffle_seeds: Vec<u64>,
    pub backend_kind: String,
    pub model: String,
    pub backend_seed: u64,
    pub queries: usize,
    pub requests: u64,
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub elapsed_secs: f64,
    pub mean_secs_per_query: f64,
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    /// `runs[p]` holds every query's list after pass `p`.
    pub runs: Vec<Vec<RankedList>>,
    pub requests: Vec<u64>,
    pub malformed: Vec<MalformedCounts>,
    pub prp_rows: Vec<PrpPassRow>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub output_dir: PathBuf,
    pub run_files: Vec<PathBuf>,
    pub variants: Vec<VariantResult>,
    pub metrics: Vec<MetricRow>,
    pub aggregate: Vec<MetricRow>,
    pub malformed: Vec<(String, MalformedCounts)>,
    pub requests: Vec<RequestRow>,
    pub manifest: Manifest,
}

impl ExperimentReport {
    pub fn total_requests(&self) -> u64 {
        self.requests.iter().map(|r| r.requests).sum()
    }
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), ExperimentError> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), json + "\n").map_err(at(Stage::Write))
}

/// Runs the configured pipeline and writes all artifacts under `cfg.output_dir`.
///
/// The manifest is written first with status `running` and rewritten as
/// `complete` or `failed` (naming the stage) at the end.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).map_err(at(Stage::Write))?;
    let mut manifest = Manifest {
        status: "running".into(),
        failed_stage: None,
        error: None,
        config_digest: cfg.digest(),
        shuffle_seeds: cfg.shuffle_seeds.clone(),
        backend_kind: cfg.backend.kind.as_str().into(),
        model: cfg.backend.model_name(),
        backend_seed: cfg.backend.seed,
        queries: 0,
        requests: 0,
        backend_calls: 0,
        cache_hits: 0,
        elapsed_secs: 0.0,
        mean_secs_per_query: 0.0,
    };
    write_manifest(&cfg.output_dir, &manifest)?;
    let started = Instant::now();
    match execute(cfg, &mut manifest) {
        Ok(mut report) => {
            manifest.status = "complete".into();
            manifest.elapsed_secs = started.elapsed().as_secs_f64();
            if manifest.queries > 0 {
                manifest.mean_secs_per_query = manifest.elapsed_secs / manifest.queries as f64;
            }
            write_manifest(&cfg.output_dir, &manifest)?;
            report.manifest = manifest;
            Ok(report)
        }
        Err(e) => {
            manifest.status = "failed".into();
            manifest.failed_stage = match &e {
                ExperimentError::Stage { stage, .. } => Some(*stage),
                _ => None,
            };
            manifest.error = Some(e.to_string());
            manifest.elapsed_secs = started.elapsed().as_secs_f64();
            write_manifest(&cfg.output_dir, &manifest)?;
            Err(e)
        }
    }
}

fn execute(cfg: &ExperimentConfig, manifest: &mut Manifest) -> Result<ExperimentReport, ExperimentError> {
    let out = &cfg.output_dir;
    let inputs = Inputs::load(cfg)?;
    manifest.queries = inputs.queries.len();
    let client = build_client(cfg, inputs.qrels.clone())?;

    let first = first_stage_lists(cfg, &inputs)?;
    let mut run_files = vec![out.join("first_stage.run")];
    write_run_file(&run_files[0], &first)?;

    let pairs: Vec<(&Query, &RankedList)> = inputs.queries.iter().zip(&first).collect();
    let mut variants = Vec::new();
    for variant in cfg.variants() {
        let outcomes = map_ordered(&pairs, client.max_in_flight(), |(q, l)| {
            rerank_query(cfg, &client, &inputs.index, q, candidates(l, cfg.top_k, variant))
        });
        let outcomes: Vec<QueryOutcome> = outcomes
            .into_iter()
            .collect::<Result<_, _>>()
            .map_err(at(Stage::Rerank))?;
        let passes = outcomes.first().map_or(0, |o| o.requests.len());
        let mut result = VariantResult {
            variant,
            runs: vec![Vec::with_capacity(outcomes.len()); passes + 1],
            requests: vec![0; passes],
            malformed: vec![MalformedCounts::default(); passes],
            prp_rows: Vec::new(),
        };
        for o in outcomes {
            for (p, snap) in o.snapshots.into_iter().enumerate() {
                result.runs[p].push(snap);
            }
            for p in 0..passes {
                result.requests[p] += o.requests[p];
                result.malformed[p].merge(&o.malformed[p]);
            }
            result.prp_rows.extend(o.prp_rows);
        }
        let dir = out.join(variant.to_string());
        fs::create_dir_all(&dir).map_err(at(Stage::Write))?;
        for (p, run) in result.runs.iter().enumerate() {
            let path = dir.join(format!("pass{p}.run"));
            write_run_file(&path, run)?;
            run_files.push(path);
        }
        if cfg.reranker == RerankerKind::Prp {
            let f = create(&dir.join("prp_stats.csv"))?;
            write_prp_stats_csv(f, &result.prp_rows).map_err(at(Stage::Write))?;
        }
        variants.push(result);
    }

    let stats = client.stats();
    manifest.requests = stats.requests;
    manifest.backend_calls = stats.backend_calls;
    manifest.cache_hits = stats.cache_hits;

    let mut requests = Vec::new();
    let mut malformed = Vec::new();
    for v in &variants {
        for (p, (&n, counts)) in v.requests.iter().zip(&v.malformed).enumerate() {
            requests.push(RequestRow {
                variant: v.variant.to_string(),
                pass: p + 1,
                queries: inputs.queries.len(),
                requests: n,
            });
            malformed.push((format!("{}/pass{}", v.variant, p + 1), *counts));
        }
    }
    write_requests_csv(&out.join("requests.csv"), &requests)?;
    write_malformed_csv(create(&out.join("malformed.csv"))?, &malformed).map_err(at(Stage::Write))?;

    let (metrics, aggregate) = match &inputs.qrels {
        Some(qrels) => evaluate_variants(cfg, out, qrels, &variants)?,
        None => (Vec::new(), Vec::new()),
    };

    Ok(ExperimentReport {
        output_dir: out.clone(),
        run_files,
        variants,
        metrics,
        aggregate,
        malformed,
        requests,
        manifest: manifest.clone(),
    })
}

fn evaluate_variants(
    cfg: &ExperimentConfig,
    out: &Path,
    qrels: &Qrels,
    variants: &[VariantResult],
) -> Result<(Vec<MetricRow>, Vec<MetricRow>), ExperimentError> {
    let threshold = cfg
        .relevance_threshold
        .unwrap_or_else(|| qrels.default_relevance_threshold());
    let mut rows = Vec::new();
    let mut per_query = csv::Writer::from_writer(create(&out.join("per_query.csv"))?);
    per_query
        .write_record([
            "label".to_string(),
            "qid".to_string(),
            format!("ndcg@{NDCG_CUTOFF}"),
            format!("map@{MAP_CUTOFF}"),
        ])
        .map_err(at(Stage::Write))?;
    // reports[variant][pass] = (ndcg, map)
    let mut reports: Vec<Vec<(MetricReport, MetricReport)>> = Vec::new();
    for v in variants {
        let mut by_pass = Vec::new();
        for (p, run) in v.runs.iter().enumerate() {
            let label = format!("{}/pass{p}", v.variant);
            let ndcg = ndcg_at(run, qrels, NDCG_CUTOFF).map_err(at(Stage::Evaluate))?;
            let map = map_at(run, qrels, MAP_CUTOFF, threshold).map_err(at(Stage::Evaluate))?;
            for (qid, value) in &ndcg.per_query {
                let ap = map.per_query.get(qid).map(|v| format!("{v:.4}")).unwrap_or_default();
                per_query
                    .write_record([label.clone(), qid.clone(), format!("{value:.4}"), ap])
                    .map_err(at(Stage::Write))?;
            }
            rows.push(MetricRow {
                label,
                ndcg: ndcg.mean,
                map: map.mean,
                ndcg_ci99: None,
                map_ci99: None,
                queries: ndcg.per_query.len(),
            });
            by_pass.push((ndcg, map));
        }
        reports.push(by_pass);
    }
    per_query.flush().map_err(at(Stage::Write))?;
    write_metrics_csv(create(&out.join("metrics.csv"))?, &rows, NDCG_CUTOFF, MAP_CUTOFF).map_err(at(Stage::Write))?;

    let mut aggregate = Vec::new();
    let shuffled: Vec<&Vec<(MetricReport, MetricReport)>> = variants
        .iter()
        .zip(&reports)
        .filter(|(v, _)| matches!(v.variant, Variant::Shuffled(_)))
        .map(|(_, r)| r)
        .collect();
    if !shuffled.is_empty() {
        for p in 0..shuffled[0].len() {
            let ndcgs: Vec<MetricReport> = shuffled.iter().map(|r| r[p].0.clone()).collect();
            let maps: Vec<MetricReport> = shuffled.iter().map(|r| r[p].1.clone()).collect();
            let ndcg = aggregate_runs(&ndcgs).map_err(at(Stage::Evaluate))?;
            let map = aggregate_runs(&maps).map_err(at(Stage::Evaluate))?;
            aggregate.push(MetricRow {
                label: format!("shuffled/pass{p}"),
                ndcg: ndcg.mean,
                map: map.mean,
                ndcg_ci99: ndcg.ci99,
                map_ci99: map.ci99,
                queries: ndcg.per_query.len(),
            });
        }
        write_metrics_csv(create(&out.join("aggregate.csv"))?, &aggregate, NDCG_CUTOFF, MAP_CUTOFF)
            .map_err(at(Stage::Write))?;
    }
    Ok((rows, aggregate))
}

fn create(path: &Path) -> Result<BufWriter<File>, ExperimentError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| ExperimentError::Stage {
            stage: Stage::Write,
            source: format!("{}: {e}", path.display()).into(),
        })
}

fn write_run_file(path: &Path, lists: &[RankedList]) -> Result<(), ExperimentError> {
    let mut w = create(path)?;
    write_run(&mut w, lists)
        .and_then(|_| w.flush())
        .map_err(at(Stage::Write))
}

fn write_requests_csv(path: &Path, rows: &[RequestRow]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["variant", "pass", "queries", "requests"])
        .map_err(at(Stage::Write))?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.pass.to_string(),
            r.queries.to_string(),
            r.requests.to_string(),
        ])
        .map_err(at(Stage::Write))?;
    }
    w.flush().map_err(at(Stage::Write))
}
