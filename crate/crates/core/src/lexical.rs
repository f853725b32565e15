//! Fielded BM25 over reference records.
//!
//! Each of the test/sample/unit fields has its own inverted index. Documents
//! and queries are both synonym-expanded; expansion tokens and record synonyms
//! add postings (tf 1) without counting towards document length. Query tokens
//! may additionally match vocabulary terms within a small edit distance, at a
//! reduced weight.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fuzzy::{edits_for_length, fuzzy_multiplier, DeletionIndex, MAX_EDITS};
use crate::model::{Field, ReferenceRecord, Triad, WeightVector};
use crate::synonyms::SynonymDictionary;
use crate::text::{normalize_text, tokenize};

const SNAPSHOT_MAGIC: &str = "LABHARM-LEXICAL-INDEX";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn new(k1: f64, b: f64) -> Result<Self> {
        if !(k1.is_finite() && k1 >= 0.0) {
            return Err(Error::Invalid(format!("k1 must be >= 0, got {k1}")));
        }
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::Invalid(format!("b must be in [0, 1], got {b}")));
        }
        Ok(Bm25Params { k1, b })
    }
}

/// `ln(1 + (N - df + 0.5) / (df + 0.5))`, nonnegative for `df <= N`.
pub fn idf(doc_count: usize, df: usize) -> f64 {
    let n = doc_count as f64;
    let df = df as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

/// Inverted index for one field.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FieldIndex {
    terms: Vec<String>,
    postings: Vec<Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avgdl: f64,
    #[serde(skip)]
    term_ids: HashMap<String, u32>,
    #[serde(skip)]
    fuzzy: DeletionIndex,
}

/// Analyzed document: `(term, tf)` pairs and the length in original tokens.
fn analyze_document(
    text: &str,
    extra_terms: &[String],
    field: Field,
    dict: &SynonymDictionary,
) -> (Vec<(String, u32)>, u32) {
    let tokens = tokenize(text);
    let len = tokens.len() as u32;
    let mut counts: Vec<(String, u32)> = Vec::new();
    let mut pos: HashMap<String, usize> = HashMap::new();
    for t in &tokens {
        match pos.get(t) {
            Some(&i) => counts[i].1 += 1,
            None => {
                pos.insert(t.clone(), counts.len());
                counts.push((t.clone(), 1));
            }
        }
    }
    let mut add_once = |t: String, counts: &mut Vec<(String, u32)>| {
        if !pos.contains_key(&t) {
            pos.insert(t.clone(), counts.len());
            counts.push((t, 1));
        }
    };
    for extra in extra_terms {
        for t in tokenize(extra) {
            add_once(t, &mut counts);
        }
    }
    for t in expand_tokens(text, extra_terms, field, dict) {
        add_once(t, &mut counts);
    }
    (counts, len)
}

/// Synonym-expansion tokens for a field value (not including the original
/// tokens themselves). Lookup keys are the whole value, each extra term and
/// each token.
fn expand_tokens(
    text: &str,
    extra_terms: &[String],
    field: Field,
    dict: &SynonymDictionary,
) -> Vec<String> {
    let mut keys: Vec<String> = Vec::new();
    if !text.is_empty() {
        keys.push(text.to_string());
    }
    keys.extend(extra_terms.iter().cloned());
    keys.extend(tokenize(text));
    let mut out = Vec::new();
    let mut seen_groups: Vec<usize> = Vec::new();
    for k in keys {
        if let Some(g) = dict.group_id(&k, field) {
            if seen_groups.contains(&g) {
                continue;
            }
            seen_groups.push(g);
            for member in dict.groups(field)[g].iter() {
                for t in tokenize(member) {
                    if !out.contains(&t) {
                        out.push(t);
                    }
                }
            }
        }
    }
    out
}

/// Per-field query terms after synonym expansion: original tokens first, then
/// expansion tokens, duplicates removed.
pub fn expand_query(query: &Triad, dict: &SynonymDictionary) -> [Vec<String>; 3] {
    Field::ALL.map(|f| expand_field(query.get(f), f, dict))
}

fn expand_field(text: &str, field: Field, dict: &SynonymDictionary) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in tokenize(text) {
        if !out.contains(&t) {
            out.push(t);
        }
    }
    for t in expand_tokens(text, &[], field, dict) {
        if !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

impl FieldIndex {
    fn build(docs: &[(Vec<(String, u32)>, u32)]) -> Self {
        let mut idx = FieldIndex::default();
        let mut total: u64 = 0;
        for (doc, (terms, len)) in docs.iter().enumerate() {
            idx.doc_lengths.push(*len);
            total += u64::from(*len);
            for (t, tf) in terms {
                let id = match idx.term_ids.get(t) {
                    Some(&id) => id,
                    None => {
                        let id = idx.terms.len() as u32;
                        idx.terms.push(t.clone());
                        idx.postings.push(Vec::new());
                        idx.term_ids.insert(t.clone(), id);
                        id
                    }
                };
                idx.postings[id as usize].push(Posting {
                    doc: doc as u32,
                    tf: *tf,
                });
            }
        }
        idx.avgdl = if docs.is_empty() {
            0.0
        } else {
            total as f64 / docs.len() as f64
        };
        idx.fuzzy = DeletionIndex::build(idx.terms.iter().map(String::as_str), MAX_EDITS);
        idx
    }

    fn rebuild_lookups(&mut self) {
        self.term_ids = self
            .terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        self.fuzzy = DeletionIndex::build(self.terms.iter().map(String::as_str), MAX_EDITS);
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().map(String::as_str)
    }

    pub fn df(&self, term: &str) -> usize {
        self.term_ids
            .get(term)
            .map_or(0, |&id| self.postings[id as usize].len())
    }

    fn term_id(&self, term: &str) -> Option<u32> {
        self.term_ids.get(term).copied()
    }

    fn tf(&self, term_id: u32, doc: u32) -> u32 {
        let p = &self.postings[term_id as usize];
        match p.binary_search_by_key(&doc, |x| x.doc) {
            Ok(i) => p[i].tf,
            Err(_) => 0,
        }
    }

    pub fn doc_length(&self, doc: u32) -> u32 {
        self.doc_lengths[doc as usize]
    }

    fn tf_weight(&self, tf: u32, doc: u32, params: &Bm25Params) -> f64 {
        if tf == 0 {
            return 0.0;
        }
        let tf = f64::from(tf);
        let ratio = if self.avgdl > 0.0 {
            f64::from(self.doc_lengths[doc as usize]) / self.avgdl
        } else {
            0.0
        };
        tf * (params.k1 + 1.0) / (tf + params.k1 * (1.0 - params.b + params.b * ratio))
    }
}

/// A query term with the vocabulary entries it matches in one field.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTerm {
    pub text: String,
    /// `(term id, edit distance)`; the exact match, if present, has distance 0.
    variants: Vec<(u32, usize)>,
}

/// A query triad analyzed against a specific index.
#[derive(Debug, Clone)]
pub struct AnalyzedQuery {
    pub fields: [Vec<QueryTerm>; 3],
}

/// Inverted indexes for the three fields of a reference database.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LexicalIndex {
    records: Vec<ReferenceRecord>,
    fields: [FieldIndex; 3],
    params: Bm25Params,
    dict: SynonymDictionary,
    #[serde(skip)]
    id_to_doc: HashMap<String, u32>,
    #[serde(skip)]
    tie_rank: Vec<u32>,
}

impl LexicalIndex {
    pub fn build(
        records: Vec<ReferenceRecord>,
        dict: SynonymDictionary,
        params: Bm25Params,
    ) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        let fields = Field::ALL.map(|f| {
            let docs: Vec<_> = records
                .iter()
                .map(|r| {
                    let extra: &[String] = if f == Field::Test { &r.synonyms } else { &[] };
                    analyze_document(r.triad.get(f), extra, f, &dict)
                })
                .collect();
            FieldIndex::build(&docs)
        });
        let mut idx = LexicalIndex {
            records,
            fields,
            params,
            dict,
            id_to_doc: HashMap::new(),
            tie_rank: Vec::new(),
        };
        idx.rebuild_lookups();
        Ok(idx)
    }

    fn rebuild_lookups(&mut self) {
        self.id_to_doc = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i as u32))
            .collect();
        let mut order: Vec<u32> = (0..self.records.len() as u32).collect();
        order.sort_by(|&a, &b| self.records[a as usize].id.cmp(&self.records[b as usize].id));
        self.tie_rank = vec![0; order.len()];
        for (rank, doc) in order.into_iter().enumerate() {
            self.tie_rank[doc as usize] = rank as u32;
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ReferenceRecord] {
        &self.records
    }

    pub fn record(&self, doc: u32) -> &ReferenceRecord {
        &self.records[doc as usize]
    }

    pub fn doc_of(&self, id: &str) -> Option<u32> {
        self.id_to_doc.get(id).copied()
    }

    /// Position of each document in ascending record-id order.
    pub fn tie_rank(&self) -> &[u32] {
        &self.tie_rank
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn dictionary(&self) -> &SynonymDictionary {
        &self.dict
    }

    pub fn field(&self, field: Field) -> &FieldIndex {
        &self.fields[field.index()]
    }

    fn require_doc(&self, record_id: &str) -> Result<u32> {
        self.doc_of(record_id)
            .ok_or_else(|| Error::UnknownRecord(record_id.to_string()))
    }

    /// Plain BM25 of `query_terms` (taken verbatim, no expansion or fuzzy
    /// matching) against one field of one record.
    pub fn bm25_field_score<S: AsRef<str>>(
        &self,
        field: Field,
        query_terms: &[S],
        record_id: &str,
    ) -> Result<f64> {
        let doc = self.require_doc(record_id)?;
        let fi = self.field(field);
        let n = fi.doc_count();
        let mut score = 0.0;
        for t in query_terms {
            if let Some(id) = fi.term_id(t.as_ref()) {
                let tf = fi.tf(id, doc);
                if tf > 0 {
                    let df = fi.postings[id as usize].len();
                    score += idf(n, df) * fi.tf_weight(tf, doc, &self.params);
                }
            }
        }
        Ok(score)
    }

    /// Expands the query and resolves each term to its exact and fuzzy
    /// vocabulary matches.
    pub fn analyze(&self, query: &Triad, max_edits: usize) -> AnalyzedQuery {
        let fields = Field::ALL.map(|f| {
            let fi = self.field(f);
            let originals = tokenize(query.get(f));
            expand_field(query.get(f), f, &self.dict)
                .into_iter()
                .map(|text| {
                    let mut variants: Vec<(u32, usize)> = Vec::new();
                    if let Some(id) = fi.term_id(&text) {
                        variants.push((id, 0));
                    }
                    let edits = edits_for_length(text.chars().count(), max_edits);
                    if edits > 0 && originals.contains(&text) {
                        for (id, d) in fi.fuzzy.lookup(&text, edits, |i| &fi.terms[i as usize]) {
                            if d > 0 {
                                variants.push((id, d));
                            }
                        }
                    }
                    QueryTerm { text, variants }
                })
                .collect()
        });
        AnalyzedQuery { fields }
    }

    /// Per-field BM25 scores of every record that matches at least one query
    /// term, as `(doc, [test, sample, unit])` in ascending doc order. Each query
    /// term contributes its best-matching variant per record.
    pub fn field_scores(&self, query: &AnalyzedQuery) -> Vec<(u32, [f64; 3])> {
        let n_docs = self.records.len();
        if n_docs == 0 {
            return Vec::new();
        }
        let mut acc: Vec<[f64; 3]> = vec![[0.0; 3]; n_docs];
        let mut hit: Vec<bool> = vec![false; n_docs];
        let mut touched: Vec<u32> = Vec::new();
        let mut best: HashMap<u32, f64> = HashMap::new();
        for f in Field::ALL {
            let fi = self.field(f);
            let slot = f.index();
            for qt in &query.fields[slot] {
                match qt.variants.as_slice() {
                    [] => {}
                    [(id, e)] => {
                        let w = idf(n_docs, fi.postings[*id as usize].len()) * fuzzy_multiplier(*e);
                        for p in &fi.postings[*id as usize] {
                            acc[p.doc as usize][slot] += w * fi.tf_weight(p.tf, p.doc, &self.params);
                            if !hit[p.doc as usize] {
                                hit[p.doc as usize] = true;
                                touched.push(p.doc);
                            }
                        }
                    }
                    variants => {
                        best.clear();
                        for (id, e) in variants {
                            let w = idf(n_docs, fi.postings[*id as usize].len()) * fuzzy_multiplier(*e);
                            for p in &fi.postings[*id as usize] {
                                let c = w * fi.tf_weight(p.tf, p.doc, &self.params);
                                let slot_best = best.entry(p.doc).or_insert(0.0);
                                if c > *slot_best {
                                    *slot_best = c;
                                }
                            }
                        }
                        let mut docs: Vec<(u32, f64)> = best.iter().map(|(d, c)| (*d, *c)).collect();
                        docs.sort_unstable_by_key(|x| x.0);
                        for (d, c) in docs {
                            acc[d as usize][slot] += c;
                            if !hit[d as usize] {
                                hit[d as usize] = true;
                                touched.push(d);
                            }
                        }
                    }
                }
            }
        }
        touched.sort_unstable();
        touched.into_iter().map(|d| (d, acc[d as usize])).collect()
    }

    /// `w_test·BM25_test + w_sample·BM25_sample + w_unit·BM25_unit` for one record.
    pub fn fielded_bm25(
        &self,
        query: &AnalyzedQuery,
        weights: &WeightVector,
        record_id: &str,
    ) -> Result<f64> {
        let doc = self.require_doc(record_id)?;
        let scores = self.field_scores(query);
        let s = scores
            .binary_search_by_key(&doc, |x| x.0)
            .map(|i| scores[i].1)
            .unwrap_or([0.0; 3]);
        Ok(weighted_sum(&weights.field_weights(), &s))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}")?;
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        let mut r = BufReader::new(file);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(SNAPSHOT_MAGIC) {
            return Err(Error::Parse {
                line: 1,
                message: "not a lexical index snapshot".into(),
            });
        }
        let version: u32 = parts.next().and_then(|v| v.parse().ok()).unwrap_or(0);
        if version != SNAPSHOT_VERSION {
            return Err(Error::Parse {
                line: 1,
                message: format!("unsupported snapshot version {version}"),
            });
        }
        let mut idx: LexicalIndex = serde_json::from_reader(r)?;
        for f in &mut idx.fields {
            f.rebuild_lookups();
        }
        idx.rebuild_lookups();
        Ok(idx)
    }
}

pub(crate) fn weighted_sum(w: &[f64; 3], s: &[f64; 3]) -> f64 {
    w[0] * s[0] + w[1] * s[1] + w[2] * s[2]
}

/// Normalizes a raw term for direct lookups (`df`, postings).
pub fn term(raw: &str) -> String {
    normalize_text(raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, test: &str, sample: &str, unit: &str) -> ReferenceRecord {
        ReferenceRecord::new(id, Triad::new(test, sample, unit).unwrap(), "LC", unit, 1.0, vec![])
            .unwrap()
    }

    fn plain(records: Vec<ReferenceRecord>) -> LexicalIndex {
        LexicalIndex::build(records, SynonymDictionary::empty(), Bm25Params::default()).unwrap()
    }

    #[test]
    fn counts_on_two_records() {
        let idx = plain(vec![
            rec("a", "glucose serum", "", ""),
            rec("b", "glucose urine", "", ""),
        ]);
        let f = idx.field(Field::Test);
        assert_eq!(f.doc_count(), 2);
        assert_eq!(f.df("glucose"), 2);
        assert_eq!(f.df("serum"), 1);
        assert_eq!(f.avgdl(), 2.0);
    }

    #[test]
    fn empty_unit_has_zero_length() {
        let idx = plain(vec![rec("a", "glucose", "serum", ""), rec("b", "sodium", "serum", "mmol/l")]);
        assert_eq!(idx.field(Field::Unit).doc_length(0), 0);
        assert_eq!(idx.field(Field::Unit).doc_length(1), 3);
    }

    #[test]
    fn empty_index_returns_nothing() {
        let idx = plain(vec![]);
        let q = idx.analyze(&Triad::new("glucose", "", "").unwrap(), 1);
        assert!(idx.field_scores(&q).is_empty());
        assert!(matches!(
            idx.bm25_field_score(Field::Test, &["glucose"], "x"),
            Err(Error::UnknownRecord(_))
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = LexicalIndex::build(
            vec![rec("a", "x", "", ""), rec("a", "y", "", "")],
            SynonymDictionary::empty(),
            Bm25Params::default(),
        );
        assert!(matches!(r, Err(Error::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn ln2_golden_case() {
        // N=2, df=1, tf=1, |d| = avgdl = 2
        let idx = plain(vec![
            rec("a", "glucose serum", "", ""),
            rec("b", "glucose urine", "", ""),
        ]);
        let s = idx.bm25_field_score(Field::Test, &["serum"], "a").unwrap();
        assert!((s - std::f64::consts::LN_2).abs() < 1e-12, "{s}");
        assert_eq!(idx.bm25_field_score(Field::Test, &["potassium"], "a").unwrap(), 0.0);
        assert_eq!(idx.bm25_field_score::<&str>(Field::Test, &[], "a").unwrap(), 0.0);
    }

    #[test]
    fn fielded_projection_and_weights() {
        let idx = plain(vec![
            rec("a", "glucose serum", "", ""),
            rec("b", "glucose urine", "", ""),
        ]);
        let q = idx.analyze(&Triad::new("serum", "", "").unwrap(), 0);
        let base = idx.bm25_field_score(Field::Test, &["serum"], "a").unwrap();
        let w100 = WeightVector::new(1.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(idx.fielded_bm25(&q, &w100, "a").unwrap(), base);
        let w211 = WeightVector::new(1.0, 0.0, 2.0, 1.0, 1.0).unwrap();
        assert!((idx.fielded_bm25(&q, &w211, "a").unwrap() - 1.3862943611198906).abs() < 1e-12);
        let q0 = idx.analyze(&Triad::new("potassium", "", "").unwrap(), 0);
        assert_eq!(idx.fielded_bm25(&q0, &w211, "a").unwrap(), 0.0);
    }

    #[test]
    fn expansion_examples() {
        let d = SynonymDictionary::seed();
        let q = Triad::new("x", "serum/plasma", "THOU/L").unwrap();
        let [_, sample, unit] = expand_query(&q, &d);
        assert!(unit.contains(&"10^3/l".to_string()));
        assert_eq!(&unit[..3], &["thou/l", "thou", "l"]);
        for t in ["serum", "plasma", "ser", "plas", "or"] {
            assert!(sample.contains(&t.to_string()), "{t} missing from {sample:?}");
        }
        let q = Triad::new("glucose", "", "").unwrap();
        assert_eq!(expand_query(&q, &d)[0], vec!["glucose"]);
        // no duplicates
        let mut sorted = sample.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), sample.len());
    }

    #[test]
    fn synonym_symmetry_retrieves_any_member() {
        let d = SynonymDictionary::seed();
        let records = vec![
            rec("a", "platelets", "blood", "10^3/ul"),
            rec("b", "platelets", "blood", "mg/dl"),
        ];
        let idx = LexicalIndex::build(records, d.clone(), Bm25Params::default()).unwrap();
        for member in d.synonym_group_of("k/ul", Field::Unit) {
            let q = idx.analyze(&Triad::new("x", "", &member).unwrap(), 0);
            let scores = idx.field_scores(&q);
            let a = scores.iter().find(|s| s.0 == 0).map(|s| s.1[2]).unwrap_or(0.0);
            let b = scores.iter().find(|s| s.0 == 1).map(|s| s.1[2]).unwrap_or(0.0);
            assert!(a > b, "member {member}: {a} vs {b}");
        }
    }

    #[test]
    fn record_synonyms_are_indexed() {
        let r = ReferenceRecord::new(
            "a",
            Triad::new("hemoglobin", "blood", "g/dl").unwrap(),
            "LC",
            "g/dl",
            1.0,
            vec!["HGB".into()],
        )
        .unwrap();
        let idx = LexicalIndex::build(vec![r], SynonymDictionary::empty(), Bm25Params::default())
            .unwrap();
        assert_eq!(idx.field(Field::Test).df("hgb"), 1);
        assert_eq!(idx.field(Field::Test).doc_length(0), 1);
    }

    #[test]
    fn fuzzy_match_gets_graded_credit() {
        let idx = plain(vec![
            rec("a", "hemoglobin", "", ""),
            rec("b", "sodium", "", ""),
        ]);
        let exact = idx.analyze(&Triad::new("hemoglobin", "", "").unwrap(), 1);
        let typo = idx.analyze(&Triad::new("hemglobin", "", "").unwrap(), 1);
        let none = idx.analyze(&Triad::new("hemglobin", "", "").unwrap(), 0);
        let s_exact = idx.field_scores(&exact)[0].1[0];
        let s_typo = idx.field_scores(&typo)[0].1[0];
        assert!((s_typo - s_exact / 2.0).abs() < 1e-12);
        assert!(idx.field_scores(&none).is_empty());
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.snap");
        let idx = LexicalIndex::build(
            vec![rec("a", "glucose", "serum", "mg/dl"), rec("b", "sodium", "plasma", "mmol/l")],
            SynonymDictionary::seed(),
            Bm25Params::default(),
        )
        .unwrap();
        idx.save(&path).unwrap();
        let back = LexicalIndex::load(&path).unwrap();
        let q = Triad::new("glucos", "ser", "mg%").unwrap();
        assert_eq!(
            idx.field_scores(&idx.analyze(&q, 1)),
            back.field_scores(&back.analyze(&q, 1))
        );
        assert_eq!(back.doc_of("b"), Some(1));

        std::fs::write(&path, "SOMETHING ELSE 1\n{}").unwrap();
        assert!(matches!(LexicalIndex::load(&path), Err(Error::Parse { .. })));
    }
}
