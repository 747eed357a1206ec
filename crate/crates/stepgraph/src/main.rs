//! Operator CLI: ingest facts into a persisted index, run ad-hoc queries,
//! serve the index to external agent loops, and drive training, evaluation
//! and ablation reports on the synthetic environment.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use stepgraph::config::{ConfigError, ExperimentConfig};
use stepgraph::embed::{EmbeddingProvider, SidecarProvider, SyntheticProvider};
use stepgraph::env::{evaluate, generate_corpus, Corpus, CorpusError, PolicyParams, QaEnv, ToyPolicy};
use stepgraph::fnv1a64;
use stepgraph::grpo::train;
use stepgraph::retrieval::{RetrievalEngine, RetrievalMode, RetrievalQuery};
use stepgraph::service::{serve_stream, serve_tcp, ServeOptions};
use stepgraph::store::{
    ingest_jsonl, read_incidence_cache, write_incidence_cache, KnowledgeHypergraph,
};

#[derive(Parser)]
#[command(name = "stepgraph", version, about = "hypergraph retrieval + step-wise GRPO at desk scale")]
struct Cli {
    /// flat `section.key = value` config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// override one config key, e.g. --set retrieval.k=3 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and persist a hypergraph index from a JSONL fact file
    Ingest {
        /// input facts, one JSON object per line
        facts: PathBuf,
        /// index directory to write (facts.jsonl + incidence.bin)
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank facts for one query against a persisted index
    Query {
        /// index directory or facts JSONL file
        #[arg(long)]
        index: PathBuf,
        /// query text
        text: String,
        #[arg(long)]
        k: Option<usize>,
        /// baseline | informativeness
        #[arg(long)]
        mode: Option<String>,
        /// print the per-entity scoring breakdown
        #[arg(long)]
        explain: bool,
        /// explicit query entity (repeatable; skips extraction)
        #[arg(long = "entity")]
        entities: Vec<String>,
        /// sidecar embedding JSONL instead of the synthetic provider
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Serve line-delimited JSON queries over stdio or local TCP
    Serve {
        #[arg(long)]
        index: PathBuf,
        /// serve stdin/stdout instead of TCP
        #[arg(long)]
        stdio: bool,
        /// TCP port on 127.0.0.1 (0 picks a free port)
        #[arg(long, default_value_t = 0)]
        port: u16,
        /// stop after this many connections (soak testing)
        #[arg(long)]
        max_conns: Option<usize>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Train the toy policy with step-wise GRPO; writes metrics + checkpoint
    Train {
        /// run output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy evaluation of a checkpoint on the configured task set
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Aggregate run directories into an ablation table
    Report {
        /// completed run directories (from `train`)
        dirs: Vec<PathBuf>,
        /// also write the table as CSV here
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum CliError {
    /// exit 1: bad usage or configuration
    Usage(String),
    /// exit 2: input data problems
    Data(String),
    /// exit 3: runtime failure
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Infeasible(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for assignment in &cli.overrides {
        cfg.apply_override(assignment)?;
    }
    cfg.reward
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Ingest { facts, out } => cmd_ingest(&facts, &out),
        Command::Query {
            index,
            text,
            k,
            mode,
            explain,
            entities,
            embeddings,
        } => cmd_query(&cfg, &index, &text, k, mode.as_deref(), explain, &entities, embeddings.as_deref()),
        Command::Serve {
            index,
            stdio,
            port,
            max_conns,
            embeddings,
        } => cmd_serve(&cfg, &index, stdio, port, max_conns, embeddings.as_deref()),
        Command::Train { out } => cmd_train(&cfg, &out),
        Command::Eval { checkpoint } => cmd_eval(&cfg, &checkpoint),
        Command::Report { dirs, out } => cmd_report(&dirs, out.as_deref()),
    }
}

// ---------------------------------------------------------------------------
// index persistence
// ---------------------------------------------------------------------------

fn facts_path(index: &Path) -> PathBuf {
    if index.is_dir() {
        index.join("facts.jsonl")
    } else {
        index.to_path_buf()
    }
}

fn load_index(index: &Path) -> Result<KnowledgeHypergraph, CliError> {
    let path = facts_path(index);
    let bytes = fs::read(&path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let jsonl_hash = fnv1a64(&bytes);
    let (graph, report) = ingest_jsonl(bytes.as_slice())
        .map_err(|e| CliError::Data(e.to_string()))?;
    for (line, reason) in &report.rejected {
        eprintln!("warning: {}:{line}: {reason}", path.display());
    }
    if graph.edge_count() == 0 {
        return Err(CliError::Data(format!(
            "{}: no valid fact records",
            path.display()
        )));
    }
    // binary incidence cache is an optimization only; any mismatch means
    // the JSONL (the source of truth) wins and the cache is ignored
    if index.is_dir() {
        let cache_path = index.join("incidence.bin");
        if let Ok(bytes) = fs::read(&cache_path) {
            match read_incidence_cache(jsonl_hash, &mut bytes.as_slice()) {
                Ok(Some(_)) => {}
                _ => eprintln!(
                    "warning: {} is stale, rebuilt incidence from JSONL",
                    cache_path.display()
                ),
            }
        }
    }
    Ok(graph)
}

fn provider_from(
    cfg: &ExperimentConfig,
    embeddings: Option<&Path>,
) -> Result<Box<dyn EmbeddingProvider>, CliError> {
    match embeddings {
        None => Ok(Box::new(SyntheticProvider::new(
            cfg.embed_seed,
            cfg.embed_dimension,
        ))),
        Some(path) => {
            let file = fs::File::open(path)
                .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
            let provider = SidecarProvider::load_jsonl(BufReader::new(file))
                .map_err(|e| CliError::Data(e.to_string()))?;
            Ok(Box::new(provider))
        }
    }
}

fn parse_mode(cfg: &ExperimentConfig, mode: Option<&str>) -> Result<RetrievalMode, CliError> {
    match mode {
        None => Ok(cfg.retrieval_mode),
        Some(m) => m.parse().map_err(CliError::Usage),
    }
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

fn cmd_ingest(facts: &Path, out: &Path) -> Result<(), CliError> {
    let bytes = fs::read(facts)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", facts.display())))?;
    let (graph, report) =
        ingest_jsonl(bytes.as_slice()).map_err(|e| CliError::Data(e.to_string()))?;
    for (line, reason) in &report.rejected {
        eprintln!("warning: {}:{line}: {reason}", facts.display());
    }
    if graph.edge_count() == 0 {
        return Err(CliError::Data(format!(
            "{}: no valid fact records",
            facts.display()
        )));
    }

    fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let mut jsonl = Vec::new();
    for rec in graph.to_fact_records() {
        serde_json::to_writer(&mut jsonl, &rec)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        jsonl.push(b'\n');
    }
    let facts_out = out.join("facts.jsonl");
    fs::write(&facts_out, &jsonl)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", facts_out.display())))?;
    let mut cache = Vec::new();
    write_incidence_cache(&graph, fnv1a64(&jsonl), &mut cache)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let cache_out = out.join("incidence.bin");
    fs::write(&cache_out, cache)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", cache_out.display())))?;

    println!("|V|={} |E|={}", graph.entity_count(), graph.edge_count());
    println!(
        "accepted={} rejected={} duplicates_collapsed={}",
        report.accepted,
        report.rejected.len(),
        report.duplicates_collapsed
    );
    let mut histogram = std::collections::BTreeMap::new();
    for v in 0..graph.entity_count() {
        *histogram.entry(graph.degree(v)).or_insert(0usize) += 1;
    }
    println!("degree histogram:");
    for (degree, count) in histogram {
        println!("  {degree}: {count}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_query(
    cfg: &ExperimentConfig,
    index: &Path,
    text: &str,
    k: Option<usize>,
    mode: Option<&str>,
    explain: bool,
    entities: &[String],
    embeddings: Option<&Path>,
) -> Result<(), CliError> {
    let mode = parse_mode(cfg, mode)?;
    let k = k.unwrap_or(cfg.retrieval_k);
    let graph = load_index(index)?;
    let engine = RetrievalEngine::new(&graph, provider_from(cfg, embeddings)?)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let explicit = if entities.is_empty() {
        None
    } else {
        let mut ids = Vec::new();
        for name in entities {
            ids.push(
                graph
                    .lookup_entity(name)
                    .ok_or_else(|| CliError::Data(format!("unknown entity {name:?}")))?,
            );
        }
        Some(ids)
    };
    let query = RetrievalQuery {
        text: text.to_string(),
        turn_index: 0,
        explicit_entities: explicit,
        k,
    };
    let result = engine
        .retrieve(&query, mode)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    // per-entity breakdown only exists in informativeness scoring
    let breakdowns = if explain && result.mode == RetrievalMode::Informativeness {
        let ids = engine.resolve_query_entities(&query);
        let scored = engine
            .score_hyperedges(&ids)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        Some(scored)
    } else {
        None
    };

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for fact in &result.facts {
        let mut line = serde_json::to_value(fact).map_err(|e| CliError::Runtime(e.to_string()))?;
        line["mode"] = json!(result.mode);
        line["truncated"] = json!(result.truncated);
        if let Some(scored) = &breakdowns {
            if let Some(s) = scored.iter().find(|s| s.edge_id == fact.edge_id) {
                line["breakdown"] = serde_json::to_value(&s.breakdown)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
            }
        }
        writeln!(out, "{line}").map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn cmd_serve(
    cfg: &ExperimentConfig,
    index: &Path,
    stdio: bool,
    port: u16,
    max_conns: Option<usize>,
    embeddings: Option<&Path>,
) -> Result<(), CliError> {
    let graph = load_index(index)?;
    let engine = RetrievalEngine::new(&graph, provider_from(cfg, embeddings)?)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let opts = ServeOptions {
        default_k: cfg.retrieval_k,
        default_mode: cfg.retrieval_mode,
    };
    if stdio {
        let stdin = std::io::stdin();
        let stdout = std::io::stdout();
        serve_stream(&engine, &opts, stdin.lock(), stdout.lock())
            .map_err(|e| CliError::Runtime(e.to_string()))
    } else {
        serve_tcp(&engine, &opts, port, max_conns, &mut std::io::stdout())
            .map_err(|e| CliError::Runtime(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config_hash: String,
    corpus_hash: String,
    best_em: f64,
    best_iter: usize,
    params: PolicyParams,
}

#[derive(Serialize, Deserialize)]
struct RunSummary {
    config_hash: String,
    corpus_hash: String,
    retrieval_mode: RetrievalMode,
    reward_label: String,
    seed: u64,
    final_em: f64,
    final_f1: f64,
    final_mean_turns: f64,
}

fn corpus_hash(corpus: &Corpus) -> String {
    let mut jsonl = Vec::new();
    for rec in corpus.graph.to_fact_records() {
        serde_json::to_writer(&mut jsonl, &rec).expect("serialize fact");
        jsonl.push(b'\n');
    }
    format!("{:016x}", fnv1a64(&jsonl))
}

fn reward_label(cfg: &ExperimentConfig) -> String {
    format!(
        "l1={} l2={} outcome_every={}",
        cfg.reward.lambda1, cfg.reward.lambda2, cfg.reward.outcome_in_every_step
    )
}

fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let corpus = generate_corpus(&cfg.corpus)?;
    let env = QaEnv::new(
        &corpus,
        Box::new(SyntheticProvider::new(cfg.embed_seed, cfg.embed_dimension)),
        cfg.retrieval_mode,
        cfg.retrieval_k,
        cfg.max_turns,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    let log = train(&env, &cfg.reward, &cfg.train).map_err(|e| CliError::Runtime(e.to_string()))?;

    fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let config_hash = format!("{:016x}", cfg.config_hash());
    let corpus_hash = corpus_hash(&corpus);

    let mut csv = String::new();
    csv.push_str(&format!("# config_hash={config_hash} corpus_hash={corpus_hash}\n"));
    csv.push_str("iter,mean_outcome,em,f1,mean_turns,kl,clip_frac,wall_ms\n");
    for r in &log.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iter, r.mean_outcome, r.em, r.f1, r.mean_turns, r.kl, r.clip_frac, r.wall_ms
        ));
    }
    write_text(&out.join("metrics.csv"), &csv)?;
    write_text(&out.join("config.txt"), &cfg.canonical())?;

    let checkpoint = Checkpoint {
        config_hash: config_hash.clone(),
        corpus_hash: corpus_hash.clone(),
        best_em: log.best_em,
        best_iter: log.best_iter,
        params: log.best_params.clone(),
    };
    write_text(
        &out.join("checkpoint.json"),
        &serde_json::to_string_pretty(&checkpoint).map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;

    let last = log.rows.last();
    let summary = RunSummary {
        config_hash,
        corpus_hash,
        retrieval_mode: cfg.retrieval_mode,
        reward_label: reward_label(cfg),
        seed: cfg.train.seed,
        final_em: last.map_or(0.0, |r| r.em),
        final_f1: last.map_or(0.0, |r| r.f1),
        final_mean_turns: last.map_or(0.0, |r| r.mean_turns),
    };
    write_text(
        &out.join("run.json"),
        &serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;

    println!(
        "trained {} iterations: best em={:.4} at iter {} (final em={:.4}) -> {}",
        log.rows.len(),
        log.best_em,
        log.best_iter,
        summary.final_em,
        out.display()
    );
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn cmd_eval(cfg: &ExperimentConfig, checkpoint_path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(checkpoint_path).map_err(|e| {
        CliError::Data(format!("cannot read {}: {e}", checkpoint_path.display()))
    })?;
    let checkpoint: Checkpoint =
        serde_json::from_str(&text).map_err(|e| CliError::Data(e.to_string()))?;

    let config_hash = format!("{:016x}", cfg.config_hash());
    if checkpoint.config_hash != config_hash {
        return Err(CliError::Data(format!(
            "config hash mismatch: checkpoint was trained with {} but the current config hashes to {config_hash}",
            checkpoint.config_hash
        )));
    }

    let corpus = generate_corpus(&cfg.corpus)?;
    if corpus_hash(&corpus) != checkpoint.corpus_hash {
        return Err(CliError::Data(format!(
            "corpus hash mismatch: checkpoint {} vs regenerated {}",
            checkpoint.corpus_hash,
            corpus_hash(&corpus)
        )));
    }
    let env = QaEnv::new(
        &corpus,
        Box::new(SyntheticProvider::new(cfg.embed_seed, cfg.embed_dimension)),
        cfg.retrieval_mode,
        cfg.retrieval_k,
        cfg.max_turns,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    let policy = ToyPolicy::new(checkpoint.params, cfg.train.temperature);
    let all: Vec<usize> = (0..corpus.tasks.len()).collect();
    let report = evaluate(&env, &policy, &all);
    println!(
        "{}",
        json!({
            "em": report.em,
            "f1": report.f1,
            "mean_turns": report.mean_turns,
            "n_tasks": report.n_tasks,
        })
    );
    Ok(())
}

fn cmd_report(dirs: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    if dirs.is_empty() {
        return Err(CliError::Usage("report needs at least one run directory".into()));
    }
    struct Row {
        mode: String,
        reward: String,
        corpus: String,
        em: Vec<f64>,
        f1: Vec<f64>,
        turns: Vec<f64>,
        seeds: Vec<u64>,
    }
    let mut rows: Vec<Row> = Vec::new();
    let mut incomplete: Vec<String> = Vec::new();

    for dir in dirs {
        let run_path = dir.join("run.json");
        let summary: RunSummary = match fs::read_to_string(&run_path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
        {
            Some(s) => s,
            None => {
                incomplete.push(dir.display().to_string());
                continue;
            }
        };
        if !dir.join("metrics.csv").exists() {
            incomplete.push(dir.display().to_string());
            continue;
        }
        let mode = match summary.retrieval_mode {
            RetrievalMode::Baseline => "baseline",
            RetrievalMode::Informativeness => "informativeness",
        }
        .to_string();
        // never average across corpora: the corpus hash is part of the key
        let row = rows.iter_mut().find(|r| {
            r.mode == mode && r.reward == summary.reward_label && r.corpus == summary.corpus_hash
        });
        let row = match row {
            Some(r) => r,
            None => {
                rows.push(Row {
                    mode,
                    reward: summary.reward_label.clone(),
                    corpus: summary.corpus_hash.clone(),
                    em: vec![],
                    f1: vec![],
                    turns: vec![],
                    seeds: vec![],
                });
                rows.last_mut().unwrap()
            }
        };
        row.em.push(summary.final_em);
        row.f1.push(summary.final_f1);
        row.turns.push(summary.final_mean_turns);
        row.seeds.push(summary.seed);
    }

    let hashes: std::collections::BTreeSet<&str> =
        rows.iter().map(|r| r.corpus.as_str()).collect();
    if hashes.len() > 1 {
        eprintln!(
            "warning: runs span {} distinct corpus hashes; rows are kept separate and never averaged together",
            hashes.len()
        );
    }
    for dir in &incomplete {
        eprintln!("warning: {dir}: missing run.json or metrics.csv, row incomplete");
    }

    fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return (mean, None);
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, Some(var.sqrt()))
    }
    fn cell(xs: &[f64]) -> String {
        match mean_std(xs) {
            (m, None) => format!("{m:.3}"),
            (m, Some(s)) => format!("{m:.3}±{s:.3}"),
        }
    }

    println!(
        "{:<16} {:<34} {:>6} {:>14} {:>14} {:>14}",
        "mode", "reward", "seeds", "em", "f1", "mean_turns"
    );
    let mut csv = String::from("mode,reward,corpus_hash,n_seeds,em_mean,em_std,f1_mean,f1_std,mean_turns_mean,mean_turns_std\n");
    for r in &rows {
        println!(
            "{:<16} {:<34} {:>6} {:>14} {:>14} {:>14}",
            r.mode,
            r.reward,
            r.seeds.len(),
            cell(&r.em),
            cell(&r.f1),
            cell(&r.turns)
        );
        let (em_m, em_s) = mean_std(&r.em);
        let (f1_m, f1_s) = mean_std(&r.f1);
        let (tu_m, tu_s) = mean_std(&r.turns);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.mode,
            r.reward.replace(' ', "_"),
            r.corpus,
            r.seeds.len(),
            em_m,
            em_s.unwrap_or(f64::NAN),
            f1_m,
            f1_s.unwrap_or(f64::NAN),
            tu_m,
            tu_s.unwrap_or(f64::NAN)
        ));
    }
    if let Some(path) = out {
        write_text(path, &csv)?;
    }
    Ok(())
}
