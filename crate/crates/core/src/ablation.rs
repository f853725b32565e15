//! Weight tuning per retrieval mode and the retrieval ablation grid.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexical::{Bm25Params, LexicalIndex};
use crate::metrics::{format_table, report_from_ranks, MetricReport, DEFAULT_KS};
use crate::model::{ReferenceRecord, Triad, WeightVector};
use crate::pairs::{GenerationSchedule, PairFactory};
use crate::rerank::{apply_reranker, CompatibilityScorer, ReferenceScorer, RerankConfig, TrainConfig, TrainingReport, DEFAULT_LAMBDA};
use crate::retriever::{QueryComponents, RetrievalMode, Retriever};
use crate::semantic::{EmbeddingProvider, HashingEmbedder, VectorStore};
use crate::synonyms::SynonymDictionary;
use crate::synth::{generate_benchmark, record_triads, SynthConfig};
use crate::tuner::{tune, Observation, TunerConfig};

/// Builds both indexes over `records` with the fallback embedder. Record
/// synonyms are folded into the dictionary's test groups.
pub fn build_retriever(
    records: Vec<ReferenceRecord>,
    mut dict: SynonymDictionary,
    params: Bm25Params,
    dimension: usize,
) -> Result<Retriever> {
    dict.merge_record_synonyms(&records);
    let provider: Arc<dyn EmbeddingProvider> = Arc::new(HashingEmbedder::new(dimension));
    let vectors = VectorStore::build(&records, provider.as_ref())?;
    let lexical = Arc::new(LexicalIndex::build(records, dict, params)?);
    Retriever::new(lexical, vectors, provider)
}

/// Queries with precomputed retrieval signals, so that the MRR of a weight
/// vector can be evaluated without touching the indexes again.
pub struct TuningSet<'a> {
    retriever: &'a Retriever,
    components: Vec<QueryComponents>,
    gold: Vec<u32>,
}

impl<'a> TuningSet<'a> {
    pub fn new(retriever: &'a Retriever, queries: &[(Triad, String)], max_edits: usize) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let gold = queries
            .iter()
            .map(|(_, g)| retriever.lexical().doc_of(g).ok_or_else(|| Error::UnknownRecord(g.clone())))
            .collect::<Result<Vec<_>>>()?;
        let components = queries
            .par_iter()
            .map(|(q, _)| retriever.components(q, max_edits, true, true, None))
            .collect::<Result<Vec<_>>>()?;
        Ok(TuningSet {
            retriever,
            components,
            gold,
        })
    }

    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }

    /// Gold ranks over the full record set (`None` = not retrieved).
    pub fn ranks(&self, weights: &WeightVector, mode: RetrievalMode) -> Vec<Option<usize>> {
        self.components
            .par_iter()
            .zip(&self.gold)
            .map(|(c, &g)| self.retriever.rank_of(c, weights, mode, g))
            .collect()
    }

    /// Mean reciprocal rank; summed in query order so the value does not
    /// depend on the thread count.
    pub fn mrr(&self, weights: &WeightVector, mode: RetrievalMode) -> f64 {
        let ranks = self.ranks(weights, mode);
        ranks.iter().map(|r| r.map_or(0.0, |r| 1.0 / r as f64)).sum::<f64>() / ranks.len() as f64
    }
}

/// Search box for a mode: the unused mixing weight is pinned at 0, and for
/// semantic-only the field weights are pinned at 1 (they have no effect).
pub fn mode_bounds(mode: RetrievalMode) -> Vec<(f64, f64)> {
    let b = WeightVector::bounds();
    match mode {
        RetrievalMode::Lexical => vec![b[0], (0.0, 0.0), b[2], b[3], b[4]],
        RetrievalMode::Semantic => vec![(0.0, 0.0), b[1], (1.0, 1.0), (1.0, 1.0), (1.0, 1.0)],
        RetrievalMode::Hybrid => b.to_vec(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeTuning {
    pub mode: RetrievalMode,
    pub weights: WeightVector,
    pub validation_mrr: f64,
    pub trace: Vec<Observation>,
}

/// Tunes the weights of one mode to maximize validation MRR.
pub fn tune_mode(
    set: &TuningSet<'_>,
    mode: RetrievalMode,
    budget: usize,
    seed: u64,
    warm_start: Vec<WeightVector>,
) -> Result<ModeTuning> {
    let mut cfg = TunerConfig::new(mode_bounds(mode), seed);
    cfg.budget = budget;
    cfg.initial_designs = cfg.initial_designs.min(budget);
    cfg.warm_start = warm_start.iter().map(|w| w.to_array().to_vec()).collect();
    let res = tune(
        |theta| {
            let w = WeightVector::from_slice(theta)?;
            Ok(set.mrr(&w, mode))
        },
        &cfg,
    )?;
    Ok(ModeTuning {
        mode,
        weights: WeightVector::from_slice(&res.best_theta)?,
        validation_mrr: res.best_value,
        trace: res.trace,
    })
}

/// Tunes lexical, semantic and hybrid in turn. The hybrid search is warm
/// started from the best lexical and semantic points, so its validation MRR
/// is at least theirs.
pub fn tune_all_modes(set: &TuningSet<'_>, budget: usize, seed: u64) -> Result<[ModeTuning; 3]> {
    let lexical = tune_mode(set, RetrievalMode::Lexical, budget, seed, Vec::new())?;
    let semantic = tune_mode(set, RetrievalMode::Semantic, budget, seed, Vec::new())?;
    let mut warm = vec![lexical.weights];
    let l = lexical.weights;
    warm.push(WeightVector {
        beta: semantic.weights.beta.min(1.0),
        ..l
    });
    warm.push(WeightVector {
        alpha: 0.0,
        beta: semantic.weights.beta,
        ..l
    });
    let hybrid = tune_mode(set, RetrievalMode::Hybrid, budget, seed, warm)?;
    Ok([lexical, semantic, hybrid])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationMode {
    #[serde(rename = "lexical")]
    Lexical,
    #[serde(rename = "semantic")]
    Semantic,
    #[serde(rename = "hybrid")]
    Hybrid,
    #[serde(rename = "hybrid+rerank")]
    HybridRerank,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Lexical,
        AblationMode::Semantic,
        AblationMode::Hybrid,
        AblationMode::HybridRerank,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Lexical => "lexical",
            AblationMode::Semantic => "semantic",
            AblationMode::Hybrid => "hybrid",
            AblationMode::HybridRerank => "hybrid+rerank",
        }
    }

    pub fn retrieval(self) -> RetrievalMode {
        match self {
            AblationMode::Lexical => RetrievalMode::Lexical,
            AblationMode::Semantic => RetrievalMode::Semantic,
            AblationMode::Hybrid | AblationMode::HybridRerank => RetrievalMode::Hybrid,
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown ablation mode '{s}'")))
    }
}

/// Weights used by each retrieval mode in an ablation run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModeWeights {
    pub lexical: WeightVector,
    pub semantic: WeightVector,
    pub hybrid: WeightVector,
}

impl ModeWeights {
    pub fn uniform(w: WeightVector) -> Self {
        ModeWeights {
            lexical: w,
            semantic: w,
            hybrid: w,
        }
    }

    pub fn from_tuning(t: &[ModeTuning; 3]) -> Self {
        ModeWeights {
            lexical: t[0].weights,
            semantic: t[1].weights,
            hybrid: t[2].weights,
        }
    }

    pub fn get(&self, mode: RetrievalMode) -> WeightVector {
        match mode {
            RetrievalMode::Lexical => self.lexical,
            RetrievalMode::Semantic => self.semantic,
            RetrievalMode::Hybrid => self.hybrid,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub weights: WeightVector,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub top_k: usize,
    pub rerank: RerankConfig,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, mode: AblationMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn table(&self) -> String {
        let rows: Vec<(String, &MetricReport)> =
            self.rows.iter().map(|r| (r.mode.to_string(), &r.report)).collect();
        format_table(&rows)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Evaluates each mode on `queries` (query triad, gold record id). Every mode
/// ranks its top `top_k` candidates; the reranked mode reorders the hybrid
/// top `top_k`, so all rows are comparable at the same depth.
pub fn run_ablation(
    retriever: &Retriever,
    queries: &[(Triad, String)],
    modes: &[AblationMode],
    weights: &ModeWeights,
    scorer: Option<&dyn CompatibilityScorer>,
    rerank_cfg: &RerankConfig,
    top_k: usize,
    max_edits: usize,
) -> Result<AblationReport> {
    if queries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if top_k == 0 {
        return Err(Error::Invalid("top_k must be positive".into()));
    }
    let components = queries
        .par_iter()
        .map(|(q, _)| retriever.components(q, max_edits, true, true, None))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let w = weights.get(mode.retrieval());
        let scorer = match mode {
            AblationMode::HybridRerank => Some(scorer.ok_or_else(|| {
                Error::Invalid("hybrid+rerank needs a compatibility scorer".into())
            })?),
            _ => None,
        };
        let per_query = queries
            .par_iter()
            .zip(&components)
            .map(|((q, gold), comps)| -> Result<(Option<usize>, bool)> {
                let mut list = retriever.fuse(comps, &w, mode.retrieval(), top_k);
                if list.is_empty() {
                    return Ok((None, false));
                }
                if let Some(s) = scorer {
                    list = apply_reranker(q, &list, s, rerank_cfg)?.0;
                }
                Ok((list.iter().position(|c| &c.id == gold).map(|p| p + 1), true))
            })
            .collect::<Result<Vec<_>>>()?;
        let ranks: Vec<Option<usize>> = per_query.iter().map(|x| x.0).collect();
        let with_results = per_query.iter().filter(|x| x.1).count();
        let ks: Vec<usize> = DEFAULT_KS.iter().copied().filter(|&k| k <= top_k.max(1)).collect();
        rows.push(AblationRow {
            mode,
            weights: w,
            report: report_from_ranks(&ranks, with_results, &ks),
        });
    }
    Ok(AblationReport {
        top_k,
        rerank: *rerank_cfg,
        rows,
    })
}

/// The reranker rules that can be switched on: λ-fusion with the top-1
/// override, fusion alone, and the override alone.
pub fn rerank_variants(lambda: f64) -> [RerankConfig; 3] {
    let base = RerankConfig {
        lambda,
        fusion: true,
        override_top1: true,
    };
    [
        base,
        RerankConfig {
            override_top1: false,
            ..base
        },
        RerankConfig { fusion: false, ..base },
    ]
}

/// Picks the reranker rule set with the best MRR on `queries` (normally the
/// validation split); earlier variants win ties.
pub fn select_rerank_config(
    retriever: &Retriever,
    queries: &[(Triad, String)],
    weights: &WeightVector,
    scorer: &dyn CompatibilityScorer,
    lambda: f64,
    top_k: usize,
    max_edits: usize,
) -> Result<(RerankConfig, Vec<(RerankConfig, f64)>)> {
    let mut scored = Vec::new();
    for cfg in rerank_variants(lambda) {
        let rep = run_ablation(
            retriever,
            queries,
            &[AblationMode::HybridRerank],
            &ModeWeights::uniform(*weights),
            Some(scorer),
            &cfg,
            top_k,
            max_edits,
        )?;
        scored.push((cfg, rep.rows[0].report.mrr));
    }
    let mut best = scored[0];
    for &(c, m) in &scored[1..] {
        if m > best.1 {
            best = (c, m);
        }
    }
    Ok((best.0, scored))
}

/// Every knob of the synthetic benchmark run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub synth: SynthConfig,
    pub dimension: usize,
    pub max_edits: usize,
    pub top_k: usize,
    pub tune_budget: usize,
    pub tune_seed: u64,
    pub pairs: usize,
    pub pair_seed: u64,
    /// Retrieval depth used to mine hard negatives.
    pub neighbors: usize,
    pub train: TrainConfig,
    pub lambda: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            synth: SynthConfig::default(),
            dimension: crate::semantic::DEFAULT_DIMENSION,
            max_edits: 1,
            top_k: 10,
            tune_budget: 120,
            tune_seed: 11,
            pairs: 40_000,
            pair_seed: 3,
            neighbors: 10,
            train: TrainConfig::default(),
            lambda: DEFAULT_LAMBDA,
        }
    }
}

pub struct BenchmarkOutcome {
    pub tuning: [ModeTuning; 3],
    pub scorer: ReferenceScorer,
    pub training: TrainingReport,
    /// Validation MRR of each reranker rule set.
    pub rerank_selection: Vec<(RerankConfig, f64)>,
    pub report: AblationReport,
}

/// Generates the benchmark, tunes each mode and picks the reranker rules on
/// the validation queries, trains the scorer on factory pairs drawn from the
/// reference records, and reports all four modes on the test queries.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkOutcome> {
    let bench = generate_benchmark(&cfg.synth);
    let mut dict = SynonymDictionary::seed();
    dict.merge_record_synonyms(&bench.records);
    let triads = record_triads(&bench.records);
    let retriever = build_retriever(bench.records, SynonymDictionary::seed(), Bm25Params::default(), cfg.dimension)?;
    let as_pairs = |qs: &[crate::synth::SynthQuery]| -> Vec<(Triad, String)> {
        qs.iter().map(|q| (q.triad.clone(), q.gold.clone())).collect()
    };
    let validation = as_pairs(&bench.validation);
    let test = as_pairs(&bench.test);

    let set = TuningSet::new(&retriever, &validation, cfg.max_edits)?;
    let tuning = tune_all_modes(&set, cfg.tune_budget, cfg.tune_seed)?;
    let weights = ModeWeights::from_tuning(&tuning);

    let factory =
        PairFactory::new(triads, dict.clone()).with_retriever_neighbors(&retriever, cfg.neighbors, weights.hybrid)?;
    let pairs = factory.generate_dataset(&GenerationSchedule::with_total(cfg.pairs), cfg.pair_seed)?;
    let (scorer, training) = ReferenceScorer::train(dict, &pairs, &cfg.train)?;

    let (rerank, rerank_selection) = select_rerank_config(
        &retriever,
        &validation,
        &weights.hybrid,
        &scorer,
        cfg.lambda,
        cfg.top_k,
        cfg.max_edits,
    )?;
    let report = run_ablation(
        &retriever,
        &test,
        &AblationMode::ALL,
        &weights,
        Some(&scorer),
        &rerank,
        cfg.top_k,
        cfg.max_edits,
    )?;
    Ok(BenchmarkOutcome {
        tuning,
        scorer,
        training,
        rerank_selection,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Retriever, Vec<(Triad, String)>) {
        let b = generate_benchmark(&SynthConfig {
            records: 300,
            validation_queries: 60,
            test_queries: 60,
            seed: 5,
        });
        let r = build_retriever(b.records, SynonymDictionary::seed(), Bm25Params::default(), 128).unwrap();
        let q = b.test.into_iter().map(|q| (q.triad, q.gold)).collect();
        (r, q)
    }

    #[test]
    fn tuning_set_mrr_matches_ablation_depth_free_ranks() {
        let (r, q) = small();
        let set = TuningSet::new(&r, &q, 2).unwrap();
        let w = WeightVector::default();
        let ranks = set.ranks(&w, RetrievalMode::Hybrid);
        let rep = run_ablation(&r, &q, &[AblationMode::Hybrid], &ModeWeights::uniform(w), None, &RerankConfig::default(), 10, 2)
            .unwrap();
        let truncated: Vec<Option<usize>> = ranks.iter().map(|x| x.filter(|&r| r <= 10)).collect();
        let expect = report_from_ranks(&truncated, rep.rows[0].report.queries_with_results, &DEFAULT_KS);
        assert_eq!(rep.rows[0].report, expect);
    }

    #[test]
    fn single_mode_gives_single_row() {
        let (r, q) = small();
        let rep = run_ablation(
            &r,
            &q,
            &[AblationMode::Lexical],
            &ModeWeights::uniform(WeightVector::default()),
            None,
            &RerankConfig::default(),
            10,
            2,
        )
        .unwrap();
        assert_eq!(rep.rows.len(), 1);
        assert_eq!(rep.table().lines().filter(|l| l.starts_with("lexical")).count(), 1);
        let back: AblationReport = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
        assert_eq!(back.rows[0].report, rep.rows[0].report);
    }

    #[test]
    fn rerank_mode_requires_scorer() {
        let (r, q) = small();
        let err = run_ablation(
            &r,
            &q,
            &[AblationMode::HybridRerank],
            &ModeWeights::uniform(WeightVector::default()),
            None,
            &RerankConfig::default(),
            10,
            2,
        );
        assert!(err.is_err());
    }

    #[test]
    fn hybrid_tuning_dominates_warm_starts() {
        let (r, q) = small();
        let set = TuningSet::new(&r, &q, 2).unwrap();
        let [l, s, h] = tune_all_modes(&set, 30, 1).unwrap();
        assert!(h.validation_mrr >= l.validation_mrr);
        assert!(h.validation_mrr >= set.mrr(&s.weights, RetrievalMode::Semantic) - 1e-12);
        assert_eq!(l.weights.beta, 0.0);
        assert_eq!(s.weights.alpha, 0.0);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
        }
    }
}
