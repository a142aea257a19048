use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rerank_core::augment::{
    augment_examples, emit_training_file, filter_malformed, generate_teacher_examples, read_teacher_jsonl,
    write_teacher_jsonl,
};
use rerank_core::client::BackendKind;
use rerank_core::corpus::{ingest_corpus, read_queries, CorpusIndex};
use rerank_core::eval::{format_table, map_at, ndcg_at, read_qrels, read_run, write_run, MetricRow};
use rerank_core::experiment::{
    build_client, first_stage_lists, run_experiment, verify_determinism, verify_pair, ExperimentConfig,
    ExperimentError, ExperimentReport, FirstStage, Inputs, RerankerKind,
};
use rerank_core::prompt::{PromptBuilder, DEFAULT_MAX_WINDOW};

const EXIT_USAGE: u8 = 1;
const EXIT_PIPELINE: u8 = 2;
const EXIT_NONDETERMINISTIC: u8 = 3;

#[derive(Parser)]
#[command(name = "rerank", version, about = "Listwise reranking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an index snapshot from a JSONL corpus.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// BM25 retrieval into a TREC run file.
    Retrieve {
        /// Index snapshot or JSONL corpus.
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 1000)]
        depth: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Listwise sliding-window reranking experiment.
    Rerank(ExperimentArgs),
    /// Pairwise sliding baseline experiment.
    Prp(ExperimentArgs),
    /// Score a run file against qrels.
    Evaluate {
        #[arg(long)]
        run: Vec<PathBuf>,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value_t = 10)]
        ndcg_k: usize,
        #[arg(long, default_value_t = 100)]
        map_k: usize,
        /// Grade counted relevant for MAP; derived from the qrels when omitted.
        #[arg(long)]
        threshold: Option<u32>,
    },
    /// Build a training file from teacher outputs.
    Augment {
        /// Teacher outputs JSONL; when omitted they are generated with the config's backend.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where generated teacher outputs are saved.
        #[arg(long)]
        teacher_out: Option<PathBuf>,
        /// One shuffled copy per seed.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print the tables of a finished experiment directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Run an experiment twice and compare all run and CSV outputs.
    Verify {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Use this backend seed for the second execution (negative control).
        #[arg(long)]
        second_seed: Option<u64>,
    },
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    qrels: Option<PathBuf>,
    /// Import this run file instead of running BM25.
    #[arg(long)]
    first_stage_run: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    backend: Option<BackendKind>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    passes: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    shuffle_seeds: Option<Vec<u64>>,
    #[arg(long)]
    reranker: Option<RerankerKind>,
}

impl ExperimentArgs {
    /// Config file (if any) with flags applied on top.
    fn resolve(&self, default_reranker: Option<RerankerKind>) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(r) = default_reranker {
            cfg.reranker = r;
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { cfg.$($field).+ = v.clone().into(); })*
            };
        }
        set!(
            corpus => corpus, index => index, queries => queries, qrels => qrels,
            output_dir => output_dir, cache => cache, backend => backend.kind,
            endpoint => backend.endpoint, model => backend.model, noise_rate => backend.noise_rate,
            seed => backend.seed, max_in_flight => backend.max_in_flight, top_k => top_k,
            window => window, stride => stride, passes => passes, shuffle_seeds => shuffle_seeds,
            reranker => reranker,
        );
        if let Some(run) = &self.first_stage_run {
            cfg.first_stage = FirstStage::Import { run: run.clone() };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_report(report: &ExperimentReport) {
    println!("output: {}", report.output_dir.display());
    if !report.metrics.is_empty() {
        print!("{}", format_table(&report.metrics, 10, 100));
    }
    if !report.aggregate.is_empty() {
        print!("{}", format_table(&report.aggregate, 10, 100));
    }
    for (label, c) in &report.malformed {
        if c.malformed() > 0 {
            println!(
                "{label}: {} malformed of {} (wrong format {}, repetition {}, missing {})",
                c.malformed(),
                c.total(),
                c.wrong_format,
                c.repetition,
                c.missing
            );
        }
    }
    println!("requests: {}", report.total_requests());
}

fn load_index(path: &Path) -> Result<CorpusIndex> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    if path.extension().is_some_and(|e| e == "jsonl") {
        Ok(ingest_corpus(reader)?)
    } else {
        Ok(CorpusIndex::load(reader)?)
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

/// Returns `Ok(false)` when verification found a difference.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Index { corpus, output } => {
            let index = ingest_corpus(open(&corpus)?)?;
            let mut w = create(&output)?;
            index.save(&mut w)?;
            w.flush()?;
            println!("indexed {} passages into {}", index.doc_count(), output.display());
        }
        Command::Retrieve {
            index,
            queries,
            depth,
            output,
        } => {
            let index = load_index(&index)?;
            let queries = read_queries(open(&queries)?)?;
            let lists: Vec<_> = queries.iter().map(|q| index.bm25_search(q, depth)).collect();
            let mut w = create(&output)?;
            write_run(&mut w, &lists)?;
            w.flush()?;
            println!("retrieved {} queries into {}", lists.len(), output.display());
        }
        Command::Rerank(args) => {
            let cfg = args.resolve(args.reranker.or(Some(RerankerKind::Listwise)))?;
            print_report(&run_experiment(&cfg)?);
        }
        Command::Prp(args) => {
            let cfg = args.resolve(Some(RerankerKind::Prp))?;
            print_report(&run_experiment(&cfg)?);
        }
        Command::Evaluate {
            run,
            qrels,
            ndcg_k,
            map_k,
            threshold,
        } => {
            if run.is_empty() {
                bail!("at least one --run is required");
            }
            let qrels = read_qrels(open(&qrels)?)?;
            let threshold = threshold.unwrap_or_else(|| qrels.default_relevance_threshold());
            let mut rows = Vec::new();
            for path in &run {
                let lists = read_run(open(path)?)?;
                let ndcg = ndcg_at(&lists, &qrels, ndcg_k)?;
                let map = map_at(&lists, &qrels, map_k, threshold)?;
                rows.push(MetricRow {
                    label: path.display().to_string(),
                    ndcg: ndcg.mean,
                    map: map.mean,
                    ndcg_ci99: None,
                    map_ci99: None,
                    queries: ndcg.per_query.len(),
                });
            }
            print!("{}", format_table(&rows, ndcg_k, map_k));
        }
        Command::Augment {
            teacher,
            config,
            teacher_out,
            seeds,
            output,
        } => {
            let examples = match (teacher, config) {
                (Some(path), _) => read_teacher_jsonl(open(&path)?)?,
                (None, Some(cfg_path)) => {
                    let cfg = ExperimentConfig::load(&cfg_path)?;
                    cfg.validate()?;
                    let inputs = Inputs::load(&cfg)?;
                    let client = build_client(&cfg, inputs.qrels.clone())?;
                    let first = first_stage_lists(&cfg, &inputs)?;
                    let prompts = PromptBuilder::new(client.model()).with_max_passage_words(cfg.max_passage_words);
                    let examples = generate_teacher_examples(
                        &client,
                        &prompts,
                        &inputs.queries,
                        &first,
                        &inputs.index,
                        DEFAULT_MAX_WINDOW,
                    )?;
                    if let Some(p) = &teacher_out {
                        write_teacher_jsonl(create(p)?, &examples)?;
                    }
                    examples
                }
                (None, None) => bail!("either --teacher or --config is required"),
            };
            let (kept, stats) = filter_malformed(examples);
            let records = augment_examples(&kept, &seeds, &PromptBuilder::default())?;
            emit_training_file(create(&output)?, &records)?;
            println!(
                "kept {} of {} teacher outputs (rejected {:.4}: wrong format {}, repetition {}, missing {}); wrote {} records",
                stats.kept(),
                stats.counts.total(),
                stats.rejected_fraction(),
                stats.counts.wrong_format,
                stats.counts.repetition,
                stats.counts.missing,
                records.len()
            );
        }
        Command::Report { dir } => {
            let manifest = std::fs::read_to_string(dir.join("manifest.json"))
                .with_context(|| format!("{} has no manifest", dir.display()))?;
            println!("{}", manifest.trim_end());
            for name in ["metrics.csv", "aggregate.csv", "malformed.csv", "requests.csv"] {
                let path = dir.join(name);
                if path.exists() {
                    println!("\n# {name}");
                    print!("{}", std::fs::read_to_string(&path)?);
                }
            }
        }
        Command::Verify { exp, second_seed } => {
            let cfg = exp.resolve(None)?;
            let report = match second_seed {
                None => verify_determinism(&cfg)?,
                Some(seed) => {
                    let mut other = cfg.clone();
                    other.backend.seed = seed;
                    verify_pair(&cfg, &other, &cfg.output_dir.join("verify"))?
                }
            };
            match &report.mismatch {
                None => println!("identical: {} files compared", report.files_compared),
                Some(m) => {
                    println!("outputs differ: {m}");
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_NONDETERMINISTIC),
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<ExperimentError>() {
                Some(ExperimentError::InvalidConfig(_) | ExperimentError::ConfigFile { .. }) => {
                    ExitCode::from(EXIT_USAGE)
                }
                _ => ExitCode::from(EXIT_PIPELINE),
            }
        }
    }
}
