//! Dense embeddings and exhaustive cosine search.

use std::hash::Hasher;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use fnv::FnvHasher;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ReferenceRecord, Triad};

/// Serialized form of a triad used as embedding input.
pub fn triad_text(triad: &Triad) -> String {
    format!(
        "TEST: {} SAMPLE: {} UNIT: {}",
        triad.test(),
        triad.sample(),
        triad.unit()
    )
}

pub fn record_text(record: &ReferenceRecord) -> String {
    triad_text(&record.triad)
}

/// Cosine similarity; 0 when either vector is all zeros.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Source of text embeddings. Implementations must be deterministic: the same
/// text always yields the same vector.
pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
    /// Identifies the provider and its configuration; stored with vectors.
    fn fingerprint(&self) -> String;
}

/// Feature-hashing embedder over character trigrams and whole words.
///
/// Field labels (`TEST:`, `SAMPLE:`, `UNIT:`) are not embedded themselves;
/// they switch the weight applied to the words that follow.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    field_weights: [f64; 3],
}

pub const DEFAULT_DIMENSION: usize = 128;

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder::new(DEFAULT_DIMENSION)
    }
}

fn fnv(parts: &[&[u8]]) -> u64 {
    let mut h = FnvHasher::default();
    for p in parts {
        h.write(p);
        h.write_u8(0xff);
    }
    h.finish()
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        HashingEmbedder {
            dim: dim.max(1),
            field_weights: [1.0, 0.5, 0.5],
        }
    }

    pub fn with_field_weights(mut self, weights: [f64; 3]) -> Self {
        self.field_weights = weights;
        self
    }

    fn add(&self, v: &mut [f64], feature: &[u8], field: u8, weight: f64) {
        let h = fnv(&[&[field], feature]);
        let bucket = (h % self.dim as u64) as usize;
        let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
        v[bucket] += sign * weight;
    }

    fn embed_vec(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        // Untagged text counts as the test field.
        let mut field = 0u8;
        for word in text.split_whitespace() {
            match word {
                "TEST:" => field = 0,
                "SAMPLE:" => field = 1,
                "UNIT:" => field = 2,
                _ => {
                    let w = self.field_weights[field as usize];
                    self.add(&mut v, word.as_bytes(), field, w);
                    let padded: Vec<char> =
                        std::iter::once('#').chain(word.chars()).chain(std::iter::once('#')).collect();
                    let mut buf = [0u8; 12];
                    for g in padded.windows(3) {
                        let mut n = 0;
                        for c in g {
                            n += c.encode_utf8(&mut buf[n..]).len();
                        }
                        self.add(&mut v, &buf[..n], field | 0x10, w);
                    }
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.embed_vec(text))
    }

    fn fingerprint(&self) -> String {
        format!(
            "hashing-trigram-v1 dim={} weights={:?}",
            self.dim, self.field_weights
        )
    }
}

/// Record embeddings in record order, stored as `f32` with precomputed
/// inverse norms.
#[derive(Debug, Clone)]
pub struct VectorStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    inv_norms: Vec<f64>,
    fingerprint: String,
}

impl VectorStore {
    pub fn build(records: &[ReferenceRecord], provider: &dyn EmbeddingProvider) -> Result<Self> {
        let vectors: Vec<Vec<f64>> = records
            .par_iter()
            .map(|r| provider.embed(&record_text(r)))
            .collect::<Result<_>>()?;
        let ids = records.iter().map(|r| r.id.clone()).collect();
        VectorStore::from_vectors(provider.dimension(), ids, vectors, provider.fingerprint())
    }

    pub fn from_vectors(
        dim: usize,
        ids: Vec<String>,
        vectors: Vec<Vec<f64>>,
        fingerprint: String,
    ) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::LengthMismatch(vectors.len(), ids.len()));
        }
        let mut data = Vec::with_capacity(dim * vectors.len());
        let mut inv_norms = Vec::with_capacity(vectors.len());
        for (id, v) in ids.iter().zip(&vectors) {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid(format!("non-finite embedding for '{id}'")));
            }
            let start = data.len();
            data.extend(v.iter().map(|&x| x as f32));
            let norm = data[start..]
                .iter()
                .map(|&x| f64::from(x) * f64::from(x))
                .sum::<f64>()
                .sqrt();
            inv_norms.push(if norm > 0.0 { 1.0 / norm } else { 0.0 });
        }
        Ok(VectorStore {
            dim,
            ids,
            data,
            inv_norms,
            fingerprint,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn vector(&self, i: usize) -> Vec<f64> {
        self.data[i * self.dim..(i + 1) * self.dim]
            .iter()
            .map(|&x| f64::from(x))
            .collect()
    }

    /// Clipped cosine `max(0, cos)` of the query against every stored vector,
    /// in store order.
    pub fn semantic_scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        if qn == 0.0 || self.dim == 0 {
            return Ok(vec![0.0; self.len()]);
        }
        let q: Vec<f64> = query.iter().map(|x| x / qn).collect();
        Ok(self
            .data
            .chunks_exact(self.dim)
            .zip(&self.inv_norms)
            .map(|(row, inv)| {
                if *inv == 0.0 {
                    return 0.0;
                }
                let dot: f64 = row.iter().zip(&q).map(|(&x, y)| f64::from(x) * y).sum();
                (dot * inv).clamp(0.0, 1.0)
            })
            .collect())
    }

    /// Writes `dim=<D>` then `<id>\t<v1,...,vD>` lines.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "dim={}", self.dim)?;
        writeln!(w, "#fingerprint={}", self.fingerprint)?;
        for (i, id) in self.ids.iter().enumerate() {
            write!(w, "{id}\t")?;
            for (j, x) in self.data[i * self.dim..(i + 1) * self.dim].iter().enumerate() {
                if j > 0 {
                    w.write_all(b",")?;
                }
                write!(w, "{x}")?;
            }
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a vectors file. Lines starting with `#` and containing no tab are
    /// comments.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        let dim: usize = header
            .trim()
            .strip_prefix("dim=")
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: "expected 'dim=<D>' header".into(),
            })?;
        let mut fingerprint = String::from("precomputed");
        let mut ids = Vec::new();
        let mut vectors = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            if line.starts_with('#') && !line.contains('\t') {
                if let Some(fp) = line.strip_prefix("#fingerprint=") {
                    fingerprint = fp.to_string();
                }
                continue;
            }
            let (id, values) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: lineno,
                message: "expected '<id>\\t<values>'".into(),
            })?;
            let v: Vec<f64> = values
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: lineno,
                    message: e.to_string(),
                })?;
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            ids.push(id.to_string());
            vectors.push(v);
        }
        VectorStore::from_vectors(dim, ids, vectors, fingerprint)
    }

    /// Reorders the store to follow `ids`; fails unless both cover exactly the
    /// same set of records.
    pub fn aligned_to(&self, ids: &[String]) -> Result<Self> {
        if ids.len() != self.ids.len() {
            return Err(Error::IndexMismatch);
        }
        let pos: std::collections::HashMap<&str, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut inv_norms = Vec::with_capacity(ids.len());
        for id in ids {
            let &i = pos.get(id.as_str()).ok_or(Error::IndexMismatch)?;
            data.extend_from_slice(&self.data[i * self.dim..(i + 1) * self.dim]);
            inv_norms.push(self.inv_norms[i]);
        }
        Ok(VectorStore {
            dim: self.dim,
            ids: ids.to_vec(),
            data,
            inv_norms,
            fingerprint: self.fingerprint.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, t: &str, s: &str, u: &str) -> ReferenceRecord {
        ReferenceRecord::new(id, Triad::new(t, s, u).unwrap(), "", u, 1.0, vec![]).unwrap()
    }

    #[test]
    fn record_text_format() {
        let r = rec("a", "Hemoglobin", "Blood", "g/dL");
        assert_eq!(record_text(&r), "TEST: hemoglobin SAMPLE: blood UNIT: g/dl");
        let r = rec("a", "x", "", "y");
        assert_eq!(record_text(&r), "TEST: x SAMPLE:  UNIT: y");
    }

    #[test]
    fn cosine_examples() {
        let a = [0.3, -1.2, 2.0];
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn embedder_is_deterministic_and_normalized() {
        let e = HashingEmbedder::default();
        let a = e.embed("TEST: hemoglobin SAMPLE: blood UNIT: g/dl").unwrap();
        let b = e.embed("TEST: hemoglobin SAMPLE: blood UNIT: g/dl").unwrap();
        assert_eq!(a, b);
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert!(e.embed("").unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shared_trigrams_beat_disjoint_alphabets() {
        // Cosines computed from explicit trigram count vectors.
        fn grams(s: &str) -> std::collections::BTreeMap<String, f64> {
            let mut m = std::collections::BTreeMap::new();
            let p: Vec<char> = format!("#{s}#").chars().collect();
            for w in p.windows(3) {
                *m.entry(w.iter().collect()).or_insert(0.0) += 1.0;
            }
            m
        }
        fn cos(a: &str, b: &str) -> f64 {
            let (x, y) = (grams(a), grams(b));
            let dot: f64 = x.iter().map(|(k, v)| v * y.get(k).unwrap_or(&0.0)).sum();
            let n = |m: &std::collections::BTreeMap<String, f64>| m.values().map(|v| v * v).sum::<f64>().sqrt();
            dot / (n(&x) * n(&y))
        }
        let (a, b, c) = ("hemoglobin", "hemoglobins", "xyzzq");
        assert!(cos(a, b) > cos(a, c));
        let e = HashingEmbedder::new(256);
        let ea = e.embed(a).unwrap();
        let eb = e.embed(b).unwrap();
        let ec = e.embed(c).unwrap();
        assert!(cosine_similarity(&ea, &eb).unwrap() > cosine_similarity(&ea, &ec).unwrap());
    }

    #[test]
    fn store_scores_and_clipping() {
        let store = VectorStore::from_vectors(
            2,
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-0.4, -0.9165151389911680]],
            "test".into(),
        )
        .unwrap();
        let s = store.semantic_scores(&[1.0, 0.0]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-7);
        assert_eq!(s[1], 0.0);
        assert_eq!(s[2], 0.0);
        assert!(store.semantic_scores(&[1.0]).is_err());
    }

    #[test]
    fn build_covers_every_record_and_round_trips() {
        let records = vec![rec("r1", "glucose", "serum", "mg/dl"), rec("r2", "sodium", "", "mmol/l")];
        let e = HashingEmbedder::new(32);
        let store = VectorStore::build(&records, &e).unwrap();
        assert_eq!(store.len(), records.len());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.tsv");
        store.save(&p).unwrap();
        let back = VectorStore::load(&p).unwrap();
        assert_eq!(back.ids(), store.ids());
        assert_eq!(back.fingerprint(), store.fingerprint());
        let q = e.embed("TEST: glucose SAMPLE: serum UNIT: mg/dl").unwrap();
        assert_eq!(back.semantic_scores(&q).unwrap(), store.semantic_scores(&q).unwrap());

        let swapped = back.aligned_to(&["r2".into(), "r1".into()]).unwrap();
        assert_eq!(swapped.vector(0), back.vector(1));
        assert!(matches!(back.aligned_to(&["r1".into(), "zz".into()]), Err(Error::IndexMismatch)));
    }

    #[test]
    fn load_rejects_bad_dimension() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.tsv");
        std::fs::write(&p, "dim=3\na\t1,2\n").unwrap();
        assert!(matches!(VectorStore::load(&p), Err(Error::DimensionMismatch { .. })));
        std::fs::write(&p, "3\na\t1,2,3\n").unwrap();
        assert!(matches!(VectorStore::load(&p), Err(Error::Parse { .. })));
    }

    proptest! {
        #[test]
        fn cosine_scale_invariant(
            a in proptest::collection::vec(-10.0f64..10.0, 4),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
            c in 0.01f64..100.0,
        ) {
            let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
            let x = cosine_similarity(&a, &b).unwrap();
            let y = cosine_similarity(&scaled, &b).unwrap();
            prop_assert!((x - y).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&x));
        }

        #[test]
        fn scores_in_unit_interval(text in "[a-z ]{0,30}", q in "[a-z ]{0,30}") {
            let e = HashingEmbedder::new(16);
            let store = VectorStore::from_vectors(16, vec!["x".into()], vec![e.embed(&text).unwrap()], e.fingerprint()).unwrap();
            let s = store.semantic_scores(&e.embed(&q).unwrap()).unwrap();
            prop_assert!((0.0..=1.0).contains(&s[0]));
        }
    }
}
