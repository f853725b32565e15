//! Reference and query files, query preprocessing, and batch harmonization
//! with workflow tags.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{QueryRecord, QueryStats, ReferenceRecord, TagStatus, Triad};
use crate::rerank::{apply_reranker, CompatibilityScorer, RerankConfig, RerankRule};
use crate::retriever::{normalize_candidate_scores, RankedCandidate, RetrievalConfig, RetrievalMode, Retriever};

const REFERENCE_HEADER: [&str; 8] = [
    "id",
    "test",
    "sample",
    "unit",
    "labcode",
    "preferred_unit",
    "conversion_factor",
    "synonyms",
];

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::file(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::file(path, e))
}

fn column_map(headers: &csv::StringRecord) -> HashMap<String, usize> {
    headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_lowercase(), i))
        .collect()
}

fn line_of(rec: &csv::StringRecord) -> usize {
    rec.position().map_or(0, |p| p.line() as usize)
}

/// Parses reference records (`id,test,sample,unit,labcode,preferred_unit,
/// conversion_factor,synonyms`, synonyms `|`-separated).
pub fn parse_reference_csv<R: Read>(reader: R) -> Result<Vec<ReferenceRecord>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let cols = column_map(rdr.headers()?);
    for h in REFERENCE_HEADER {
        if !cols.contains_key(h) {
            return Err(Error::Parse {
                line: 1,
                message: format!("missing column '{h}'"),
            });
        }
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let get = |name: &str| rec.get(cols[name]).unwrap_or("").trim();
        let parse_err = |e: Error| Error::Parse {
            line,
            message: e.to_string(),
        };
        let triad = Triad::new(get("test"), get("sample"), get("unit")).map_err(parse_err)?;
        let factor: f64 = get("conversion_factor").parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad conversion factor '{}'", get("conversion_factor")),
        })?;
        let synonyms = get("synonyms")
            .split('|')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        let r = ReferenceRecord::new(get("id"), triad, get("labcode"), get("preferred_unit"), factor, synonyms)
            .map_err(parse_err)?;
        out.push(r);
    }
    Ok(out)
}

pub fn read_reference_csv(path: impl AsRef<Path>) -> Result<Vec<ReferenceRecord>> {
    parse_reference_csv(open(path.as_ref())?)
}

pub fn write_reference_csv(path: impl AsRef<Path>, records: &[ReferenceRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(REFERENCE_HEADER)?;
    for r in records {
        w.write_record([
            r.id.as_str(),
            r.triad.test(),
            r.triad.sample(),
            r.triad.unit(),
            r.labcode.as_str(),
            r.preferred_unit.as_str(),
            &r.conversion_factor.to_string(),
            &r.synonyms.join("|"),
        ])?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

/// A query row that failed validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub line: usize,
    pub reason: String,
    pub test: String,
    pub sample: String,
    pub unit: String,
    pub code_hint: String,
}

#[derive(Debug, Clone, Default)]
pub struct Preprocessed {
    pub queries: Vec<QueryRecord>,
    pub rejects: Vec<Reject>,
}

/// Accepts codes shaped like `NNNNN-N` (one to five digits, a dash, one
/// check digit). Only the shape is checked.
pub fn valid_code_hint(code: &str) -> bool {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\d{1,5}-\d$").expect("static pattern"))
        .is_match(code)
}

/// Cleans a raw query CSV (`test,sample,unit` plus optional `id`,
/// `code_hint`, `frequency`, `min`, `max`, `mean`, `std`). Rows with the same
/// normalized triad are merged: frequencies add up (a row without one counts
/// once), the first id, code hint and stats are kept.
pub fn preprocess_reader<R: Read>(reader: R) -> Result<Preprocessed> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let cols = column_map(rdr.headers()?);
    for h in ["test", "sample", "unit"] {
        if !cols.contains_key(h) {
            return Err(Error::Parse {
                line: 1,
                message: format!("missing column '{h}'"),
            });
        }
    }
    let stat_cols = ["min", "max", "mean", "std"];
    let mut out = Preprocessed::default();
    let mut by_triad: HashMap<Triad, usize> = HashMap::new();
    let mut ids: HashMap<String, Triad> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let get = |name: &str| cols.get(name).and_then(|&i| rec.get(i)).unwrap_or("").trim();
        let reject = |reason: &str| Reject {
            line,
            reason: reason.to_string(),
            test: get("test").to_string(),
            sample: get("sample").to_string(),
            unit: get("unit").to_string(),
            code_hint: get("code_hint").to_string(),
        };
        let triad = match Triad::new(get("test"), get("sample"), get("unit")) {
            Ok(t) => t,
            Err(_) => {
                out.rejects.push(reject("empty test"));
                continue;
            }
        };
        let code = get("code_hint");
        if !code.is_empty() && !valid_code_hint(code) {
            out.rejects.push(reject("malformed code_hint"));
            continue;
        }
        let frequency = match get("frequency") {
            "" => 1,
            f => match f.parse::<u64>() {
                Ok(v) => v,
                Err(_) => {
                    out.rejects.push(reject("invalid frequency"));
                    continue;
                }
            },
        };
        let raw_stats: Vec<&str> = stat_cols.iter().map(|c| get(c)).collect();
        let stats = if raw_stats.iter().all(|s| s.is_empty()) {
            None
        } else {
            let parsed: Option<Vec<f64>> = raw_stats.iter().map(|s| s.parse::<f64>().ok()).collect();
            let Some(v) = parsed else {
                out.rejects.push(reject("incomplete stats"));
                continue;
            };
            let s = QueryStats {
                min: v[0],
                max: v[1],
                mean: v[2],
                std: v[3],
            };
            if v.iter().any(|x| *x < 0.0) {
                out.rejects.push(reject("negative stats"));
                continue;
            }
            if let Err(e) = s.validate() {
                out.rejects.push(reject(&e.to_string()));
                continue;
            }
            Some(s)
        };
        let id = get("id");
        if !id.is_empty() {
            if let Some(prev) = ids.get(id) {
                if *prev != triad {
                    out.rejects.push(reject("duplicate id"));
                    continue;
                }
            }
        }
        match by_triad.get(&triad) {
            Some(&i) => {
                let q = &mut out.queries[i];
                q.frequency += frequency;
                if q.code_hint.is_none() && !code.is_empty() {
                    q.code_hint = Some(code.to_string());
                }
                if q.stats.is_none() {
                    q.stats = stats;
                }
            }
            None => {
                let qid = if id.is_empty() {
                    format!("q{:06}", out.queries.len() + 1)
                } else {
                    id.to_string()
                };
                ids.insert(qid.clone(), triad.clone());
                let mut q = QueryRecord::new(qid, triad.clone());
                q.code_hint = (!code.is_empty()).then(|| code.to_string());
                q.frequency = frequency;
                q.stats = stats;
                by_triad.insert(triad, out.queries.len());
                out.queries.push(q);
            }
        }
    }
    Ok(out)
}

pub fn preprocess(path: impl AsRef<Path>) -> Result<Preprocessed> {
    preprocess_reader(open(path.as_ref())?)
}

pub fn write_rejects(path: impl AsRef<Path>, rejects: &[Reject]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rejects {
        w.serialize(r)?;
    }
    if rejects.is_empty() {
        w.write_record(["line", "reason", "test", "sample", "unit", "code_hint"])?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n").map_err(|e| Error::file(path, e))?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

/// Reads one JSON object per non-blank line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(open(path)?).lines().enumerate() {
        let line = line.map_err(|e| Error::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Queries from either a preprocessed JSON-lines file or a raw CSV (rejected
/// rows are dropped with a warning).
pub fn read_queries(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let p = preprocess(path)?;
        if !p.rejects.is_empty() {
            log::warn!("{}: {} rows rejected", path.display(), p.rejects.len());
        }
        Ok(p.queries)
    } else {
        read_jsonl(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecidedBy {
    System,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonizationResult {
    pub query_id: String,
    pub query: Triad,
    #[serde(default)]
    pub frequency: u64,
    pub candidates: Vec<RankedCandidate>,
    pub chosen: Option<String>,
    pub tag: TagStatus,
    pub decided_by: DecidedBy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<RerankRule>,
    /// Unix milliseconds of a human decision; system runs keep their time in
    /// a sidecar file so that results are reproducible byte for byte.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decided_at: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer: Option<String>,
}

impl HarmonizationResult {
    pub fn candidate(&self, id: &str) -> Option<&RankedCandidate> {
        self.candidates.iter().find(|c| c.id == id)
    }

    /// Checks the tag invariants.
    pub fn validate(&self) -> Result<()> {
        let missing = self.tag == TagStatus::Missing;
        if missing != (self.chosen.is_none() && self.candidates.is_empty()) {
            return Err(Error::Invalid(format!(
                "{}: Missing tag requires (and is required by) an empty candidate list",
                self.query_id
            )));
        }
        if self.tag.is_human() && self.decided_by != DecidedBy::Human {
            return Err(Error::Invalid(format!("{}: {} must be decided by a human", self.query_id, self.tag)));
        }
        if let Some(c) = &self.chosen {
            if self.candidate(c).is_none() {
                return Err(Error::Invalid(format!("{}: chosen '{c}' is not a candidate", self.query_id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryFailure {
    pub query_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct BatchOutcome {
    pub results: Vec<HarmonizationResult>,
    pub failures: Vec<QueryFailure>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngineConfig {
    pub retrieval: RetrievalConfig,
    pub mode: RetrievalMode,
    pub rerank: RerankConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            retrieval: RetrievalConfig::default(),
            mode: RetrievalMode::Hybrid,
            rerank: RerankConfig::default(),
        }
    }
}

/// Retrieval, reranking and tagging for queries.
pub struct Engine {
    retriever: Arc<Retriever>,
    scorer: Option<Arc<dyn CompatibilityScorer>>,
    exact: HashMap<Triad, u32>,
    cfg: EngineConfig,
}

impl Engine {
    pub fn new(retriever: Arc<Retriever>, scorer: Option<Arc<dyn CompatibilityScorer>>, cfg: EngineConfig) -> Result<Self> {
        cfg.retrieval.validate()?;
        if !(0.0..=1.0).contains(&cfg.rerank.lambda) {
            return Err(Error::Invalid(format!("lambda must be in [0, 1], got {}", cfg.rerank.lambda)));
        }
        let lex = retriever.lexical();
        let tie = lex.tie_rank();
        let mut exact: HashMap<Triad, u32> = HashMap::new();
        for (d, r) in lex.records().iter().enumerate() {
            let d = d as u32;
            exact
                .entry(r.triad.clone())
                .and_modify(|e| {
                    if tie[d as usize] < tie[*e as usize] {
                        *e = d;
                    }
                })
                .or_insert(d);
        }
        Ok(Engine {
            retriever,
            scorer,
            exact,
            cfg,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn retriever(&self) -> &Retriever {
        &self.retriever
    }

    /// Candidate record for an exact copy of the query, as a ranked entry.
    fn exact_candidate(&self, query: &Triad, list: &[RankedCandidate]) -> Option<RankedCandidate> {
        let &d = self.exact.get(query)?;
        let rec = self.retriever.lexical().record(d);
        if let Some(c) = list.iter().find(|c| c.id == rec.id) {
            return Some(c.clone());
        }
        let comps = self.retriever.components(query, self.cfg.retrieval.max_edits, true, true, None).ok()?;
        let fields = comps
            .lexical
            .iter()
            .find(|(doc, _)| *doc == d)
            .map_or([0.0; 3], |x| x.1);
        let w = &self.cfg.retrieval.weights;
        let (alpha, beta) = self.cfg.mode.mix(w);
        let fw = w.field_weights();
        let lex: f64 = fields.iter().zip(fw).map(|(s, w)| s * w).sum();
        let sem = comps.semantic.get(d as usize).copied().unwrap_or(0.0);
        Some(RankedCandidate {
            id: rec.id.clone(),
            triad: rec.triad.clone(),
            rank: 0,
            lexical_score: lex,
            field_scores: fields,
            semantic_score: sem,
            fused_score: alpha * lex + beta * sem,
            retrieval_norm: None,
            rerank_score: None,
            final_score: None,
        })
    }

    pub fn harmonize(&self, query: &QueryRecord) -> Result<HarmonizationResult> {
        let rc = &self.cfg.retrieval;
        let retrieval = self.retriever.retrieve_detailed(&query.triad, rc, self.cfg.mode, None)?;
        let mut result = HarmonizationResult {
            query_id: query.id.clone(),
            query: query.triad.clone(),
            frequency: query.frequency,
            candidates: Vec::new(),
            chosen: None,
            tag: TagStatus::Missing,
            decided_by: DecidedBy::System,
            rule: None,
            decided_at: None,
            reviewer: None,
        };
        let exact = self.exact_candidate(&query.triad, &retrieval.candidates);
        if retrieval.is_missing(rc.match_floor) && exact.is_none() {
            return Ok(result);
        }
        let mut cands = retrieval.candidates;
        normalize_candidate_scores(&mut cands)?;
        let (mut list, mut tag, rule) = match &self.scorer {
            Some(s) => apply_reranker(&query.triad, &cands, s.as_ref(), &self.cfg.rerank)?,
            None => (cands, TagStatus::Pending, RerankRule::Retrieval),
        };
        // an exact copy of a reference record always wins
        if let Some(mut e) = exact {
            if let Some(pos) = list.iter().position(|c| c.id == e.id) {
                e = list.remove(pos);
            }
            list.insert(0, e);
            list.truncate(rc.top_k);
            for (i, c) in list.iter_mut().enumerate() {
                c.rank = i + 1;
            }
            tag = TagStatus::Copy;
        }
        result.chosen = list.first().map(|c| c.id.clone());
        result.candidates = list;
        result.tag = tag;
        result.rule = Some(rule);
        Ok(result)
    }

    /// Harmonizes queries in parallel. Results keep input order; a failing
    /// query is reported and does not stop the batch.
    pub fn harmonize_batch(&self, queries: &[QueryRecord]) -> BatchOutcome {
        let all: Vec<std::result::Result<HarmonizationResult, QueryFailure>> = queries
            .par_iter()
            .map(|q| {
                self.harmonize(q).map_err(|e| QueryFailure {
                    query_id: q.id.clone(),
                    error: e.to_string(),
                })
            })
            .collect();
        let mut out = BatchOutcome::default();
        for r in all {
            match r {
                Ok(v) => out.results.push(v),
                Err(f) => {
                    log::warn!("query {} failed: {}", f.query_id, f.error);
                    out.failures.push(f)
                }
            }
        }
        out
    }
}

/// Wall-clock details of a batch run, kept beside the results file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetadata {
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
    pub queries: usize,
    pub failures: Vec<QueryFailure>,
}

pub fn sidecar_path(results: &Path) -> std::path::PathBuf {
    let mut name = results.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    results.with_file_name(name)
}

pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn code_hint_shape() {
        for ok in ["2345-7", "1-0", "12345-9"] {
            assert!(valid_code_hint(ok), "{ok}");
        }
        for bad in ["123456-7", "2345-77", "2345", "-7", "ab-1", " 2345-7"] {
            assert!(!valid_code_hint(bad), "{bad}");
        }
    }

    #[test]
    fn preprocess_rejects_and_merges() {
        let csv = "test,sample,unit,code_hint,frequency,min,max,mean,std\n\
                   Glucose,Serum,mg/dL,2345-7,3,,,,\n\
                   ,serum,mg/dl,,1,,,,\n\
                   glucose,serum,MG/DL,,2,,,,\n\
                   sodium,serum,mmol/l,12-345,1,,,,\n\
                   potassium,serum,mmol/l,,1,3,5,4,-1\n\
                   calcium,serum,mg/dl,,x,,,,\n\
                   chloride,serum,mmol/l,,,1,2,,\n\
                   magnesium,serum,mg/dl,,,1,3,2,0.5\n";
        let p = preprocess_reader(csv.as_bytes()).unwrap();
        let reasons: Vec<&str> = p.rejects.iter().map(|r| r.reason.as_str()).collect();
        assert_eq!(
            reasons,
            ["empty test", "malformed code_hint", "negative stats", "invalid frequency", "incomplete stats"]
        );
        assert_eq!(p.rejects[0].line, 3);
        assert_eq!(p.queries.len(), 2);
        let g = &p.queries[0];
        assert_eq!(g.triad, Triad::new("glucose", "serum", "mg/dl").unwrap());
        assert_eq!(g.frequency, 5);
        assert_eq!(g.code_hint.as_deref(), Some("2345-7"));
        assert_eq!(p.queries[1].id, "q000002");
        assert_eq!(p.queries[1].frequency, 1);
        assert!(p.queries[1].stats.is_some());
    }

    #[test]
    fn missing_column_is_a_parse_error() {
        assert!(matches!(preprocess_reader("test,unit\na,b\n".as_bytes()), Err(Error::Parse { .. })));
    }

    #[test]
    fn reference_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = crate::synth::generate_records(50, 4);
        let p = dir.path().join("ref.csv");
        write_reference_csv(&p, &recs).unwrap();
        assert_eq!(read_reference_csv(&p).unwrap(), recs);
    }

    #[test]
    fn reference_csv_rejects_bad_factor() {
        let csv = "id,test,sample,unit,labcode,preferred_unit,conversion_factor,synonyms\n\
                   R1,glucose,serum,mg/dl,1-1,mg/dl,0,\n";
        assert!(matches!(parse_reference_csv(csv.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn sidecar_sits_next_to_results() {
        assert_eq!(sidecar_path(Path::new("/x/out.jsonl")), Path::new("/x/out.jsonl.meta.json"));
    }
}
