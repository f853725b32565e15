//! The CLI verbs, as plain functions over a [`PipelineConfig`].

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use labharm::ablation::{mode_bounds, run_benchmark, TuningSet};
use labharm::lexical::{Bm25Params, LexicalIndex};
use labharm::metrics::{compute_report, format_table, read_gold, read_runs, MetricReport};
use labharm::pairs::{read_pairs, write_pairs, PairFactory};
use labharm::pipeline::{
    now_ms, preprocess as preprocess_file, read_jsonl, read_queries, read_reference_csv, sidecar_path,
    write_jsonl, write_reference_csv, write_rejects, Engine, EngineConfig, HarmonizationResult, RunMetadata,
};
use labharm::rerank::{CompatibilityScorer, ExternalScorer, LinearModel, ReferenceScorer};
use labharm::retriever::{RetrievalMode, Retriever};
use labharm::review::{export_feedback_pairs, ReviewStore};
use labharm::semantic::{EmbeddingProvider, HashingEmbedder, VectorStore};
use labharm::synonyms::SynonymDictionary;
use labharm::synth::{generate_benchmark, record_triads, SynthQuery};
use labharm::tuner::{tune as run_tuner, write_trace, TunerConfig};
use labharm::{Triad, WeightVector};

use crate::config::PipelineConfig;

pub const LEXICAL_SNAPSHOT: &str = "lexical.idx";
pub const VECTORS_FILE: &str = "vectors.tsv";

pub fn load_dictionary(cfg: &PipelineConfig) -> Result<SynonymDictionary> {
    match &cfg.paths.synonyms {
        Some(p) => SynonymDictionary::load(p).with_context(|| format!("loading synonyms {}", p.display())),
        None => Ok(SynonymDictionary::seed()),
    }
}

fn provider(cfg: &PipelineConfig) -> Arc<dyn EmbeddingProvider> {
    Arc::new(HashingEmbedder::new(cfg.dimension))
}

/// Builds both indexes from the reference CSV (record synonyms are merged
/// into the dictionary).
pub fn build_indexes(cfg: &PipelineConfig) -> Result<Retriever> {
    let reference = cfg
        .paths
        .reference
        .as_ref()
        .ok_or_else(|| anyhow!("paths.reference (or --reference) is required"))?;
    let records = read_reference_csv(reference)?;
    let mut dict = load_dictionary(cfg)?;
    dict.merge_record_synonyms(&records);
    let lexical = LexicalIndex::build(records, dict, Bm25Params::default())?;
    let provider = provider(cfg);
    let vectors = match &cfg.paths.vectors {
        Some(p) => VectorStore::load(p)?,
        None => VectorStore::build(lexical.records(), provider.as_ref())?,
    };
    Ok(Retriever::new(Arc::new(lexical), vectors, provider)?)
}

/// The saved index directory when configured, otherwise a fresh build.
pub fn load_retriever(cfg: &PipelineConfig) -> Result<Retriever> {
    if let Some(dir) = &cfg.paths.index_dir {
        let snap = dir.join(LEXICAL_SNAPSHOT);
        if snap.exists() {
            let lexical = LexicalIndex::load(&snap)?;
            let vectors = VectorStore::load(dir.join(VECTORS_FILE))?;
            return Ok(Retriever::new(Arc::new(lexical), vectors, provider(cfg))?);
        }
        log::warn!("{} has no index snapshot; building from the reference CSV", dir.display());
    }
    build_indexes(cfg)
}

/// Output of `tune`, also accepted as `paths.weights`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TunedWeights {
    pub mode: RetrievalMode,
    pub weights: WeightVector,
    pub validation_mrr: f64,
    pub queries: usize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WeightsFile {
    Tuned(TunedWeights),
    Bare(WeightVector),
}

pub fn read_weights(path: &Path) -> Result<WeightVector> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let w: WeightsFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(match w {
        WeightsFile::Tuned(t) => t.weights,
        WeightsFile::Bare(w) => w,
    })
}

/// Weights in effect: tuned on startup, then the weights file, then the
/// config's `retrieval.weights`.
pub fn effective_weights(cfg: &PipelineConfig, retriever: &Retriever) -> Result<WeightVector> {
    if cfg.tune_on_startup {
        let path = cfg.paths.tuning_queries.as_ref().ok_or_else(|| anyhow!("paths.tuning_queries missing"))?;
        let queries = read_labeled(path, None)?;
        let t = tune_weights(cfg, retriever, &queries, cfg.mode, &[])?;
        log::info!("tuned on startup: {:?} (validation MRR {:.4})", t.weights, t.validation_mrr);
        return Ok(t.weights);
    }
    match &cfg.paths.weights {
        Some(p) => read_weights(p),
        None => Ok(cfg.retrieval.weights),
    }
}

pub fn load_scorer(cfg: &PipelineConfig, dict: &SynonymDictionary) -> Result<Option<Arc<dyn CompatibilityScorer>>> {
    if let Some(t) = &cfg.external_scorer {
        return Ok(Some(Arc::new(ExternalScorer::new(t.clone()))));
    }
    match &cfg.paths.model {
        Some(p) => {
            let model = LinearModel::load(p)?;
            Ok(Some(Arc::new(ReferenceScorer::new(dict.clone(), model)?)))
        }
        None => Ok(None),
    }
}

// ---------------------------------------------------------------- verbs

pub struct PreprocessSummary {
    pub queries: usize,
    pub rejects: usize,
}

pub fn preprocess(input: &Path, output: &Path, rejects: &Path) -> Result<PreprocessSummary> {
    let p = preprocess_file(input)?;
    write_jsonl(output, &p.queries)?;
    write_rejects(rejects, &p.rejects)?;
    Ok(PreprocessSummary {
        queries: p.queries.len(),
        rejects: p.rejects.len(),
    })
}

pub fn index(cfg: &PipelineConfig, out_dir: &Path) -> Result<usize> {
    let r = build_indexes(cfg)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    r.lexical().save(out_dir.join(LEXICAL_SNAPSHOT))?;
    r.vectors().save(out_dir.join(VECTORS_FILE))?;
    Ok(r.len())
}

/// Labeled queries: JSON lines `{id, triad, gold}`, or a query file plus a
/// `query_id,record_id` gold CSV.
pub fn read_labeled(queries: &Path, gold: Option<&Path>) -> Result<Vec<(Triad, String)>> {
    match gold {
        None => {
            let qs: Vec<SynthQuery> = read_jsonl(queries)?;
            Ok(qs.into_iter().map(|q| (q.triad, q.gold)).collect())
        }
        Some(g) => {
            let gold = read_gold(g)?;
            read_queries(queries)?
                .into_iter()
                .map(|q| {
                    let g = gold.get(&q.id).ok_or_else(|| anyhow!("no gold record for query {}", q.id))?;
                    Ok((q.triad, g.clone()))
                })
                .collect()
        }
    }
}

const WEIGHT_NAMES: [&str; 5] = ["alpha", "beta", "w_test", "w_sample", "w_unit"];

/// Parses `name=lo:hi` bound overrides.
pub fn parse_bound(s: &str) -> Result<(usize, (f64, f64))> {
    let (name, range) = s.split_once('=').ok_or_else(|| anyhow!("expected name=lo:hi, got '{s}'"))?;
    let i = WEIGHT_NAMES
        .iter()
        .position(|n| *n == name.trim())
        .ok_or_else(|| anyhow!("unknown weight '{name}' (expected one of {WEIGHT_NAMES:?})"))?;
    let (lo, hi) = range.split_once(':').ok_or_else(|| anyhow!("expected lo:hi, got '{range}'"))?;
    let (lo, hi): (f64, f64) = (lo.trim().parse()?, hi.trim().parse()?);
    let (blo, bhi) = WeightVector::bounds()[i];
    if !(blo <= lo && lo <= hi && hi <= bhi) {
        bail!("{name} bounds {lo}:{hi} must lie within {blo}:{bhi}");
    }
    Ok((i, (lo, hi)))
}

pub struct TuneOutcome {
    pub tuned: TunedWeights,
    pub trace: Vec<labharm::tuner::Observation>,
}

fn tune_weights(
    cfg: &PipelineConfig,
    retriever: &Retriever,
    queries: &[(Triad, String)],
    mode: RetrievalMode,
    overrides: &[(usize, (f64, f64))],
) -> Result<TunedWeights> {
    Ok(tune_with_trace(cfg, retriever, queries, mode, overrides)?.tuned)
}

pub fn tune_with_trace(
    cfg: &PipelineConfig,
    retriever: &Retriever,
    queries: &[(Triad, String)],
    mode: RetrievalMode,
    overrides: &[(usize, (f64, f64))],
) -> Result<TuneOutcome> {
    let set = TuningSet::new(retriever, queries, cfg.retrieval.max_edits)?;
    let mut bounds = mode_bounds(mode);
    for &(i, b) in overrides {
        bounds[i] = b;
    }
    let mut tc = TunerConfig::new(bounds, cfg.seed);
    tc.budget = cfg.tuner.budget;
    tc.initial_designs = cfg.tuner.initial_designs.min(cfg.tuner.budget);
    tc.random_starts = cfg.tuner.random_starts;
    let res = run_tuner(
        |theta| {
            let w = WeightVector::from_slice(theta)?;
            Ok(set.mrr(&w, mode))
        },
        &tc,
    )?;
    Ok(TuneOutcome {
        tuned: TunedWeights {
            mode,
            weights: WeightVector::from_slice(&res.best_theta)?,
            validation_mrr: res.best_value,
            queries: set.len(),
        },
        trace: res.trace,
    })
}

pub fn tune(
    cfg: &PipelineConfig,
    queries: &Path,
    gold: Option<&Path>,
    overrides: &[(usize, (f64, f64))],
    out: &Path,
    trace: Option<&Path>,
) -> Result<TunedWeights> {
    let retriever = load_retriever(cfg)?;
    let labeled = read_labeled(queries, gold)?;
    let t = tune_with_trace(cfg, &retriever, &labeled, cfg.mode, overrides)?;
    fs::write(out, serde_json::to_string_pretty(&t.tuned)?).with_context(|| format!("writing {}", out.display()))?;
    if let Some(p) = trace {
        write_trace(p, &t.trace)?;
    }
    Ok(t.tuned)
}

pub fn generate_pairs(cfg: &PipelineConfig, out: &Path) -> Result<usize> {
    let retriever = load_retriever(cfg)?;
    let dict = retriever.lexical().dictionary().clone();
    let pool = record_triads(retriever.lexical().records());
    let mut factory = PairFactory::new(pool, dict);
    if cfg.pairs.neighbors > 0 {
        let w = effective_weights(cfg, &retriever)?;
        factory = factory.with_retriever_neighbors(&retriever, cfg.pairs.neighbors, w)?;
    }
    let pairs = factory.generate_dataset(&cfg.pairs.schedule, cfg.seed)?;
    write_pairs(out, &pairs)?;
    Ok(pairs.len())
}

/// Trains the reference scorer. The dictionary is the configured one plus
/// reference record synonyms when a reference is available.
pub fn train(cfg: &PipelineConfig, pairs: &Path, out: &Path, report: Option<&Path>) -> Result<labharm::rerank::TrainingReport> {
    let pairs = read_pairs(pairs)?;
    let dict = scorer_dictionary(cfg)?;
    let (scorer, rep) = ReferenceScorer::train(dict, &pairs, &cfg.train)?;
    let mut model = scorer.model().clone();
    model.metrics = Some(rep.validation.clone());
    model.save(out)?;
    if let Some(p) = report {
        fs::write(p, serde_json::to_string_pretty(&rep)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(rep)
}

fn scorer_dictionary(cfg: &PipelineConfig) -> Result<SynonymDictionary> {
    if let Some(dir) = &cfg.paths.index_dir {
        if dir.join(LEXICAL_SNAPSHOT).exists() {
            return Ok(LexicalIndex::load(dir.join(LEXICAL_SNAPSHOT))?.dictionary().clone());
        }
    }
    let mut dict = load_dictionary(cfg)?;
    if let Some(r) = &cfg.paths.reference {
        dict.merge_record_synonyms(&read_reference_csv(r)?);
    }
    Ok(dict)
}

pub fn build_engine(cfg: &PipelineConfig) -> Result<Engine> {
    let retriever = load_retriever(cfg)?;
    let weights = effective_weights(cfg, &retriever)?;
    let scorer = load_scorer(cfg, retriever.lexical().dictionary())?;
    if scorer.is_none() {
        log::warn!("no scorer configured; results are not reranked");
    }
    let mut retrieval = cfg.retrieval.clone();
    retrieval.weights = weights;
    let ec = EngineConfig {
        retrieval,
        mode: cfg.mode,
        rerank: cfg.rerank,
    };
    Ok(Engine::new(Arc::new(retriever), scorer, ec)?)
}

pub struct HarmonizeSummary {
    pub results: usize,
    pub failures: usize,
    pub metadata: PathBuf,
}

/// Harmonizes every query; results go to `out` in input order, timing and
/// per-query failures to the sidecar next to it.
pub fn harmonize(cfg: &PipelineConfig, queries: &Path, out: &Path) -> Result<HarmonizeSummary> {
    let engine = build_engine(cfg)?;
    let queries = read_queries(queries)?;
    let started = now_ms();
    let batch = engine.harmonize_batch(&queries);
    let finished = now_ms();
    write_jsonl(out, &batch.results)?;
    let meta = RunMetadata {
        started_at_ms: started,
        finished_at_ms: finished,
        queries: queries.len(),
        failures: batch.failures.clone(),
    };
    let side = sidecar_path(out);
    fs::write(&side, serde_json::to_string_pretty(&meta)?).with_context(|| format!("writing {}", side.display()))?;
    Ok(HarmonizeSummary {
        results: batch.results.len(),
        failures: batch.failures.len(),
        metadata: side,
    })
}

pub fn parse_ks(s: &str) -> Result<Vec<usize>> {
    let ks = s
        .split(',')
        .map(|k| k.trim().parse::<usize>().map_err(|e| anyhow!("bad cutoff '{k}': {e}")))
        .collect::<Result<Vec<_>>>()?;
    if ks.is_empty() || ks.contains(&0) {
        bail!("cutoffs must be positive integers");
    }
    Ok(ks)
}

pub fn evaluate(runs: &Path, gold: &Path, ks: &[usize]) -> Result<MetricReport> {
    let runs = read_runs(runs)?;
    let gold = read_gold(gold)?;
    Ok(compute_report(&runs, &gold, ks)?)
}

pub fn evaluation_table(name: &str, report: &MetricReport) -> String {
    format_table(&[(name.to_string(), report)])
}

pub fn open_review_store(results: &Path, feedback: &Path) -> Result<ReviewStore> {
    let results: Vec<HarmonizationResult> = read_jsonl(results)?;
    Ok(ReviewStore::open(results, feedback)?)
}

/// Default feedback log: `<results>.feedback.jsonl`.
pub fn default_feedback_path(results: &Path) -> PathBuf {
    let mut name = results.file_name().unwrap_or_default().to_os_string();
    name.push(".feedback.jsonl");
    results.with_file_name(name)
}

pub fn export_feedback(log: &Path, out: &Path) -> Result<usize> {
    Ok(export_feedback_pairs(log, out)?)
}

/// Writes the synthetic benchmark as ordinary pipeline inputs.
pub fn synth(cfg: &PipelineConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let b = generate_benchmark(&cfg.benchmark.synth);
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut written = Vec::new();
    let reference = out_dir.join("reference.csv");
    write_reference_csv(&reference, &b.records)?;
    written.push(reference);
    let synonyms = out_dir.join("synonyms.txt");
    fs::write(&synonyms, SynonymDictionary::seed().to_file_string())?;
    written.push(synonyms);
    for (name, qs) in [("validation", &b.validation), ("test", &b.test)] {
        let labeled = out_dir.join(format!("{name}.jsonl"));
        write_jsonl(&labeled, qs)?;
        written.push(labeled);
        let queries = out_dir.join(format!("{name}_queries.csv"));
        let mut w = csv::Writer::from_path(&queries)?;
        w.write_record(["id", "test", "sample", "unit"])?;
        for q in qs {
            w.write_record([q.id.as_str(), q.triad.test(), q.triad.sample(), q.triad.unit()])?;
        }
        w.flush()?;
        written.push(queries);
        let gold = out_dir.join(format!("{name}_gold.csv"));
        let mut w = csv::Writer::from_path(&gold)?;
        w.write_record(["query_id", "record_id"])?;
        for q in qs {
            w.write_record([q.id.as_str(), q.gold.as_str()])?;
        }
        w.flush()?;
        written.push(gold);
    }
    Ok(written)
}

pub fn ablation(cfg: &PipelineConfig, json_out: Option<&Path>) -> Result<String> {
    let out = run_benchmark(&cfg.benchmark)?;
    if let Some(p) = json_out {
        fs::write(p, out.report.to_json()?).with_context(|| format!("writing {}", p.display()))?;
    }
    let mut text = String::new();
    for t in &out.tuning {
        text.push_str(&format!(
            "tuned {:<9} validation MRR {:.4}  {:?}\n",
            t.mode.as_str(),
            t.validation_mrr,
            t.weights.to_array()
        ));
    }
    text.push_str(&format!("scorer validation F1 {:.4}\n", out.training.validation.f1));
    for (c, m) in &out.rerank_selection {
        text.push_str(&format!(
            "rerank fusion={:<5} override={:<5} validation MRR {m:.4}\n",
            c.fusion, c.override_top1
        ));
    }
    text.push('\n');
    text.push_str(&out.report.table());
    Ok(text)
}
