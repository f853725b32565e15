//! Hybrid retrieval: `α·BM25_fielded + β·max(0, cos)` over every record.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexical::{weighted_sum, LexicalIndex};
use crate::model::{Triad, WeightVector};
use crate::semantic::{triad_text, EmbeddingProvider, VectorStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    Lexical,
    Semantic,
    Hybrid,
}

impl RetrievalMode {
    pub const ALL: [RetrievalMode; 3] = [
        RetrievalMode::Lexical,
        RetrievalMode::Semantic,
        RetrievalMode::Hybrid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalMode::Lexical => "lexical",
            RetrievalMode::Semantic => "semantic",
            RetrievalMode::Hybrid => "hybrid",
        }
    }

    /// `(α, β)` actually applied under this mode.
    pub fn mix(self, w: &WeightVector) -> (f64, f64) {
        match self {
            RetrievalMode::Lexical => (w.alpha, 0.0),
            RetrievalMode::Semantic => (0.0, w.beta),
            RetrievalMode::Hybrid => (w.alpha, w.beta),
        }
    }
}

impl FromStr for RetrievalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lexical" => Ok(RetrievalMode::Lexical),
            "semantic" => Ok(RetrievalMode::Semantic),
            "hybrid" => Ok(RetrievalMode::Hybrid),
            _ => Err(Error::Invalid(format!("unknown retrieval mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub weights: WeightVector,
    pub top_k: usize,
    pub max_edits: usize,
    /// A query with no lexical match anywhere is reported as missing unless
    /// its best semantic similarity reaches this value.
    pub match_floor: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            weights: WeightVector::default(),
            top_k: 10,
            max_edits: 1,
            match_floor: 0.6,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Invalid("top_k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.match_floor) {
            return Err(Error::Invalid("match_floor must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub id: String,
    pub triad: Triad,
    pub rank: usize,
    pub lexical_score: f64,
    /// Unweighted BM25 per field (test, sample, unit).
    pub field_scores: [f64; 3],
    pub semantic_score: f64,
    pub fused_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerank_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_score: Option<f64>,
}

/// Raw per-record signals for one query, independent of the weights.
#[derive(Debug, Clone, Default)]
pub struct QueryComponents {
    /// Sparse per-field BM25, ascending doc order.
    pub lexical: Vec<(u32, [f64; 3])>,
    /// Clipped cosine for every record (empty when not computed).
    pub semantic: Vec<f64>,
}

impl QueryComponents {
    pub fn max_semantic(&self) -> f64 {
        self.semantic.iter().copied().fold(0.0, f64::max)
    }

    pub fn has_lexical_match(&self) -> bool {
        self.lexical.iter().any(|(_, s)| s.iter().any(|&x| x > 0.0))
    }

    fn dense_fields(&self, n: usize) -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; n];
        for (d, s) in &self.lexical {
            out[*d as usize] = *s;
        }
        out
    }
}

/// Result of a retrieval with the signals needed for missing-match decisions.
#[derive(Debug, Clone)]
pub struct Retrieval {
    pub candidates: Vec<RankedCandidate>,
    pub lexical_match: bool,
    pub max_semantic: f64,
}

impl Retrieval {
    pub fn is_missing(&self, match_floor: f64) -> bool {
        self.candidates.is_empty() || (!self.lexical_match && self.max_semantic < match_floor)
    }
}

/// Total order on fused scores: higher first, then lower tie rank (record id).
fn better(a: (f64, u32), b: (f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

#[inline]
fn fused(alpha: f64, beta: f64, fields: &[f64; 3], field_w: &[f64; 3], sem: f64) -> (f64, f64) {
    let lex = weighted_sum(field_w, fields);
    (lex, alpha * lex + beta * sem)
}

pub struct Retriever {
    lexical: Arc<LexicalIndex>,
    vectors: VectorStore,
    provider: Arc<dyn EmbeddingProvider>,
}

impl Retriever {
    /// Both indexes must cover the same record ids; the vector store is
    /// reordered to follow the lexical index.
    pub fn new(
        lexical: Arc<LexicalIndex>,
        vectors: VectorStore,
        provider: Arc<dyn EmbeddingProvider>,
    ) -> Result<Self> {
        if vectors.dimension() != provider.dimension() {
            return Err(Error::DimensionMismatch {
                expected: vectors.dimension(),
                actual: provider.dimension(),
            });
        }
        let ids: Vec<String> = lexical.records().iter().map(|r| r.id.clone()).collect();
        let vectors = if vectors.ids() == ids.as_slice() {
            vectors
        } else {
            let a: HashSet<&String> = ids.iter().collect();
            let b: HashSet<&String> = vectors.ids().iter().collect();
            if a != b {
                return Err(Error::IndexMismatch);
            }
            vectors.aligned_to(&ids)?
        };
        Ok(Retriever {
            lexical,
            vectors,
            provider,
        })
    }

    pub fn lexical(&self) -> &LexicalIndex {
        &self.lexical
    }

    pub fn vectors(&self) -> &VectorStore {
        &self.vectors
    }

    pub fn provider(&self) -> &dyn EmbeddingProvider {
        self.provider.as_ref()
    }

    pub fn len(&self) -> usize {
        self.lexical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lexical.is_empty()
    }

    pub fn embed_query(&self, query: &Triad) -> Result<Vec<f64>> {
        self.provider.embed(&triad_text(query))
    }

    /// Computes the lexical and/or semantic signals for a query.
    pub fn components(
        &self,
        query: &Triad,
        max_edits: usize,
        lexical: bool,
        semantic: bool,
        query_vector: Option<&[f64]>,
    ) -> Result<QueryComponents> {
        let mut c = QueryComponents::default();
        if lexical {
            let aq = self.lexical.analyze(query, max_edits);
            c.lexical = self.lexical.field_scores(&aq);
        }
        if semantic && !self.is_empty() {
            c.semantic = match query_vector {
                Some(v) => self.vectors.semantic_scores(v)?,
                None => self.vectors.semantic_scores(&self.embed_query(query)?)?,
            };
        }
        Ok(c)
    }

    /// Ranks records from precomputed components. Only records with a
    /// positive fused score are candidates.
    pub fn fuse(
        &self,
        comps: &QueryComponents,
        weights: &WeightVector,
        mode: RetrievalMode,
        top_k: usize,
    ) -> Vec<RankedCandidate> {
        let (alpha, beta) = mode.mix(weights);
        let fw = weights.field_weights();
        let tie = self.lexical.tie_rank();
        let n = self.len();
        let use_sem = beta != 0.0 && comps.semantic.len() == n;
        // (fused, lex, fields, sem, doc)
        let mut scored: Vec<(f64, f64, [f64; 3], f64, u32)> = Vec::new();
        if use_sem {
            let dense = comps.dense_fields(n);
            for d in 0..n {
                let sem = comps.semantic[d];
                let (lex, f) = fused(alpha, beta, &dense[d], &fw, sem);
                if f > 0.0 {
                    scored.push((f, lex, dense[d], sem, d as u32));
                }
            }
        } else {
            for (d, fields) in &comps.lexical {
                let sem = comps.semantic.get(*d as usize).copied().unwrap_or(0.0);
                let (lex, f) = fused(alpha, beta, fields, &fw, sem);
                if f > 0.0 {
                    scored.push((f, lex, *fields, sem, *d));
                }
            }
        }
        let cmp = |a: &(f64, f64, [f64; 3], f64, u32), b: &(f64, f64, [f64; 3], f64, u32)| {
            better((a.0, tie[a.4 as usize]), (b.0, tie[b.4 as usize]))
        };
        if scored.len() > top_k {
            scored.select_nth_unstable_by(top_k - 1, cmp);
            scored.truncate(top_k);
        }
        scored.sort_unstable_by(cmp);
        scored
            .into_iter()
            .enumerate()
            .map(|(i, (f, lex, fields, sem, d))| {
                let r = self.lexical.record(d);
                RankedCandidate {
                    id: r.id.clone(),
                    triad: r.triad.clone(),
                    rank: i + 1,
                    lexical_score: lex,
                    field_scores: fields,
                    semantic_score: sem,
                    fused_score: f,
                    retrieval_norm: None,
                    rerank_score: None,
                    final_score: None,
                }
            })
            .collect()
    }

    /// 1-based rank the record `doc` would get in the full fused ordering, or
    /// `None` when its fused score is not positive (not retrieved).
    pub fn rank_of(
        &self,
        comps: &QueryComponents,
        weights: &WeightVector,
        mode: RetrievalMode,
        doc: u32,
    ) -> Option<usize> {
        let (alpha, beta) = mode.mix(weights);
        let fw = weights.field_weights();
        let tie = self.lexical.tie_rank();
        let n = self.len();
        let use_sem = beta != 0.0 && comps.semantic.len() == n;
        let fields_of = |d: u32| {
            comps
                .lexical
                .binary_search_by_key(&d, |x| x.0)
                .map(|i| comps.lexical[i].1)
                .unwrap_or([0.0; 3])
        };
        let sem_of = |d: u32| comps.semantic.get(d as usize).copied().unwrap_or(0.0);
        let (_, gold) = fused(alpha, beta, &fields_of(doc), &fw, sem_of(doc));
        if gold <= 0.0 {
            return None;
        }
        let key = (gold, tie[doc as usize]);
        let mut ahead = 0usize;
        if use_sem {
            let mut li = 0;
            for d in 0..n as u32 {
                let fields = if li < comps.lexical.len() && comps.lexical[li].0 == d {
                    li += 1;
                    comps.lexical[li - 1].1
                } else {
                    [0.0; 3]
                };
                let (_, f) = fused(alpha, beta, &fields, &fw, comps.semantic[d as usize]);
                if better((f, tie[d as usize]), key) == Ordering::Less {
                    ahead += 1;
                }
            }
        } else {
            for (d, fields) in &comps.lexical {
                let (_, f) = fused(alpha, beta, fields, &fw, sem_of(*d));
                if better((f, tie[*d as usize]), key) == Ordering::Less {
                    ahead += 1;
                }
            }
        }
        Some(ahead + 1)
    }

    pub fn retrieve_detailed(
        &self,
        query: &Triad,
        cfg: &RetrievalConfig,
        mode: RetrievalMode,
        query_vector: Option<&[f64]>,
    ) -> Result<Retrieval> {
        cfg.validate()?;
        // Both signals are always computed: the missing-match rule needs them.
        let comps = self.components(query, cfg.max_edits, true, true, query_vector)?;
        Ok(Retrieval {
            candidates: self.fuse(&comps, &cfg.weights, mode, cfg.top_k),
            lexical_match: comps.has_lexical_match(),
            max_semantic: comps.max_semantic(),
        })
    }

    pub fn retrieve(&self, query: &Triad, cfg: &RetrievalConfig) -> Result<Vec<RankedCandidate>> {
        self.retrieve_mode(query, cfg, RetrievalMode::Hybrid)
    }

    pub fn retrieve_mode(
        &self,
        query: &Triad,
        cfg: &RetrievalConfig,
        mode: RetrievalMode,
    ) -> Result<Vec<RankedCandidate>> {
        Ok(self.retrieve_detailed(query, cfg, mode, None)?.candidates)
    }

    /// Retrieves for many queries in parallel; results keep input order.
    pub fn retrieve_batch(
        &self,
        queries: &[Triad],
        cfg: &RetrievalConfig,
        mode: RetrievalMode,
    ) -> Vec<Result<Retrieval>> {
        queries
            .par_iter()
            .map(|q| self.retrieve_detailed(q, cfg, mode, None))
            .collect()
    }
}

/// Min-max scaling to `[0, 1]`; a degenerate range maps everything to 1.
pub fn min_max_normalize(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyCandidateList);
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    Ok(scores
        .iter()
        .map(|&s| if range > 0.0 { (s - lo) / range } else { 1.0 })
        .collect())
}

/// Sets `retrieval_norm` on each candidate from its fused score.
pub fn normalize_candidate_scores(candidates: &mut [RankedCandidate]) -> Result<()> {
    let fused: Vec<f64> = candidates.iter().map(|c| c.fused_score).collect();
    for (c, n) in candidates.iter_mut().zip(min_max_normalize(&fused)?) {
        c.retrieval_norm = Some(n);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexical::Bm25Params;
    use crate::model::ReferenceRecord;
    use crate::semantic::HashingEmbedder;
    use crate::synonyms::SynonymDictionary;

    fn rec(id: &str, t: &str, s: &str, u: &str) -> ReferenceRecord {
        ReferenceRecord::new(id, Triad::new(t, s, u).unwrap(), "", u, 1.0, vec![]).unwrap()
    }

    fn retriever(records: Vec<ReferenceRecord>) -> Retriever {
        let e: Arc<dyn EmbeddingProvider> = Arc::new(HashingEmbedder::new(64));
        let store = VectorStore::build(&records, e.as_ref()).unwrap();
        let lex = LexicalIndex::build(records, SynonymDictionary::seed(), Bm25Params::default()).unwrap();
        Retriever::new(Arc::new(lex), store, e).unwrap()
    }

    /// Fixed 3-record corpus with hand-set component scores.
    fn handset() -> (Retriever, QueryComponents) {
        let r = retriever(vec![rec("c", "x", "", ""), rec("a", "y", "", ""), rec("b", "z", "", "")]);
        let comps = QueryComponents {
            lexical: vec![(0, [2.0, 0.0, 0.0]), (1, [1.0, 0.0, 0.0])],
            semantic: vec![0.0, 0.5, 1.0],
        };
        (r, comps)
    }

    #[test]
    fn fusion_arithmetic_and_id_tie_break() {
        let (r, comps) = handset();
        let w = WeightVector::new(1.0, 2.0, 1.0, 0.0, 0.0).unwrap();
        let c = r.fuse(&comps, &w, RetrievalMode::Hybrid, 10);
        let ids: Vec<&str> = c.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert!(c.iter().all(|c| (c.fused_score - 2.0).abs() < 1e-12));
        assert_eq!(c.iter().map(|c| c.rank).collect::<Vec<_>>(), [1, 2, 3]);
        assert_eq!(r.rank_of(&comps, &w, RetrievalMode::Hybrid, 0), Some(3));
        assert_eq!(r.rank_of(&comps, &w, RetrievalMode::Hybrid, 1), Some(1));
    }

    #[test]
    fn modes_project() {
        let (r, comps) = handset();
        let w = WeightVector::new(1.0, 2.0, 1.0, 0.0, 0.0).unwrap();
        let lex = r.fuse(&comps, &w, RetrievalMode::Lexical, 10);
        assert_eq!(lex.iter().map(|c| c.id.as_str()).collect::<Vec<_>>(), ["c", "a"]);
        let w0 = WeightVector::new(1.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(lex, r.fuse(&comps, &w0, RetrievalMode::Hybrid, 10));
        let sem = r.fuse(&comps, &w, RetrievalMode::Semantic, 10);
        assert_eq!(sem.iter().map(|c| c.id.as_str()).collect::<Vec<_>>(), ["b", "a"]);
        let ws = WeightVector::new(0.0, 2.0, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(sem, r.fuse(&comps, &ws, RetrievalMode::Hybrid, 10));
        assert_eq!(r.rank_of(&comps, &w, RetrievalMode::Semantic, 0), None);
    }

    #[test]
    fn top_k_and_fused_formula() {
        let r = retriever(vec![
            rec("1", "glucose", "serum", "mg/dl"),
            rec("2", "glucose", "urine", "mg/dl"),
            rec("3", "sodium", "serum", "mmol/l"),
            rec("4", "potassium", "serum", "mmol/l"),
        ]);
        let cfg = RetrievalConfig {
            weights: WeightVector::new(1.0, 3.0, 2.0, 1.0, 0.5).unwrap(),
            top_k: 2,
            ..Default::default()
        };
        let c = r.retrieve(&Triad::new("glucose", "serum", "mg/dl").unwrap(), &cfg).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].id, "1");
        for x in &c {
            let w = cfg.weights;
            let lex = w.w_test * x.field_scores[0] + w.w_sample * x.field_scores[1] + w.w_unit * x.field_scores[2];
            assert!((x.lexical_score - lex).abs() < 1e-12);
            assert!((x.fused_score - (w.alpha * lex + w.beta * x.semantic_score)).abs() < 1e-9);
        }
    }

    #[test]
    fn mismatched_record_sets_rejected() {
        let records = vec![rec("a", "x", "", ""), rec("b", "y", "", "")];
        let e: Arc<dyn EmbeddingProvider> = Arc::new(HashingEmbedder::new(8));
        let store = VectorStore::build(&records[..1], e.as_ref()).unwrap();
        let lex = LexicalIndex::build(records, SynonymDictionary::empty(), Bm25Params::default()).unwrap();
        assert!(matches!(Retriever::new(Arc::new(lex), store, e), Err(Error::IndexMismatch)));
    }

    #[test]
    fn empty_index_gives_empty_list() {
        let r = retriever(vec![]);
        let c = r.retrieve(&Triad::new("x", "", "").unwrap(), &RetrievalConfig::default()).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(min_max_normalize(&[4.0, 2.0, 0.0]).unwrap(), [1.0, 0.5, 0.0]);
        assert_eq!(min_max_normalize(&[7.0]).unwrap(), [1.0]);
        assert_eq!(min_max_normalize(&[3.0, 3.0, 3.0]).unwrap(), [1.0, 1.0, 1.0]);
        assert!(matches!(min_max_normalize(&[]), Err(Error::EmptyCandidateList)));
    }
}
