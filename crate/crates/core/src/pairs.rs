//! Labeled triad pairs for training the compatibility scorer.
//!
//! Positives substitute synonyms into one or more components. Negatives
//! corrupt the test (N1), test and sample (N2) or all three components (N3)
//! with values outside the source's synonym groups; any component left
//! uncorrupted may still be swapped for a synonym. Hard negatives draw their
//! replacement values from near-miss triads instead of the whole pool.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Field, Triad, WeightVector};
use crate::retriever::{RetrievalConfig, Retriever};
use crate::synonyms::SynonymDictionary;
use crate::text::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairClass {
    #[serde(rename = "POS")]
    Pos,
    N1,
    N2,
    N3,
}

impl PairClass {
    pub const ALL: [PairClass; 4] = [PairClass::Pos, PairClass::N1, PairClass::N2, PairClass::N3];
    pub const NEGATIVE: [PairClass; 3] = [PairClass::N1, PairClass::N2, PairClass::N3];

    pub fn label(self) -> u8 {
        u8::from(self == PairClass::Pos)
    }

    /// Components replaced by a non-synonymous value.
    pub fn corrupted(self) -> &'static [Field] {
        match self {
            PairClass::Pos => &[],
            PairClass::N1 => &[Field::Test],
            PairClass::N2 => &[Field::Test, Field::Sample],
            PairClass::N3 => &[Field::Test, Field::Sample, Field::Unit],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PairClass::Pos => "POS",
            PairClass::N1 => "N1",
            PairClass::N2 => "N2",
            PairClass::N3 => "N3",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledPair {
    pub left: Triad,
    pub right: Triad,
    pub label: u8,
    pub class: PairClass,
    pub difficulty: Difficulty,
}

/// Checks a pair against the dictionary: positives must agree up to synonyms
/// on every component; negatives must disagree on exactly the components
/// their class corrupts.
pub fn verify_pair(pair: &LabeledPair, dict: &SynonymDictionary) -> std::result::Result<(), String> {
    if pair.label != pair.class.label() {
        return Err(format!("label {} does not match class {}", pair.label, pair.class.as_str()));
    }
    for f in Field::ALL {
        let same = dict.equivalent(pair.left.get(f), pair.right.get(f), f);
        let corrupted = pair.class.corrupted().contains(&f);
        if same == corrupted {
            return Err(format!(
                "{} component {}: '{}' vs '{}'",
                pair.class.as_str(),
                f,
                pair.left.get(f),
                pair.right.get(f)
            ));
        }
    }
    Ok(())
}

fn synonym_variant(value: &str, field: Field, dict: &SynonymDictionary, rng: &mut impl Rng) -> Option<String> {
    let members = dict.members(value, field)?;
    let others: Vec<&String> = members.iter().filter(|m| m.as_str() != value).collect();
    others.choose(rng).map(|s| s.to_string())
}

/// Replaces at least one substitutable component with a synonym; returns an
/// identical pair when no component has synonyms.
pub fn make_positive(source: &Triad, dict: &SynonymDictionary, rng: &mut impl Rng) -> LabeledPair {
    let substitutable: Vec<Field> = Field::ALL
        .into_iter()
        .filter(|&f| {
            dict.members(source.get(f), f)
                .is_some_and(|m| m.len() >= 2)
        })
        .collect();
    let mut chosen: Vec<Field> = substitutable.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
    if chosen.is_empty() {
        if let Some(&f) = substitutable.choose(rng) {
            chosen.push(f);
        }
    }
    let mut right = source.clone();
    for f in chosen {
        if let Some(v) = synonym_variant(source.get(f), f, dict, rng) {
            right = right.with(f, &v).expect("synonyms are non-empty");
        }
    }
    LabeledPair {
        left: source.clone(),
        right,
        label: 1,
        class: PairClass::Pos,
        difficulty: Difficulty::Easy,
    }
}

/// Distinct non-empty field values available as corruption material.
#[derive(Debug, Clone)]
pub struct PairPool {
    triads: Vec<Triad>,
    values: [Vec<String>; 3],
    tokens: [HashMap<String, Vec<u32>>; 3],
}

impl PairPool {
    pub fn new(triads: Vec<Triad>) -> Self {
        let values = Field::ALL.map(|f| {
            let set: std::collections::BTreeSet<&str> =
                triads.iter().map(|t| t.get(f)).filter(|v| !v.is_empty()).collect();
            set.into_iter().map(String::from).collect::<Vec<_>>()
        });
        let tokens = Field::ALL.map(|f| {
            let mut m: HashMap<String, Vec<u32>> = HashMap::new();
            for (i, v) in values[f.index()].iter().enumerate() {
                for t in tokenize(v) {
                    let e = m.entry(t).or_default();
                    if e.last() != Some(&(i as u32)) {
                        e.push(i as u32);
                    }
                }
            }
            m
        });
        PairPool {
            triads,
            values,
            tokens,
        }
    }

    pub fn triads(&self) -> &[Triad] {
        &self.triads
    }

    pub fn values(&self, field: Field) -> &[String] {
        &self.values[field.index()]
    }

    /// Number of distinct pool values for `field` not equivalent to `value`.
    pub fn count_outside(&self, field: Field, value: &str, dict: &SynonymDictionary) -> usize {
        self.values(field)
            .iter()
            .filter(|v| !dict.equivalent(value, v, field))
            .count()
    }

    /// Pool values sharing at least one token with `value`.
    fn overlapping(&self, field: Field, value: &str) -> Vec<&str> {
        let mut ids: Vec<u32> = tokenize(value)
            .iter()
            .filter_map(|t| self.tokens[field.index()].get(t))
            .flatten()
            .copied()
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter()
            .map(|i| self.values[field.index()][i as usize].as_str())
            .collect()
    }
}

/// Retrieved near-miss triads: top-`k` hits that are not synonym-equivalent
/// to `source` on all three components but share at least one token with it.
pub fn mine_hard_negatives(
    source: &Triad,
    retriever: &Retriever,
    k: usize,
    cfg: &RetrievalConfig,
) -> Result<Vec<Triad>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let dict = retriever.lexical().dictionary();
    let cfg = RetrievalConfig {
        top_k: k,
        ..cfg.clone()
    };
    let src_tokens: HashSet<String> = Field::ALL
        .iter()
        .flat_map(|&f| tokenize(source.get(f)))
        .collect();
    let hits = retriever.retrieve(source, &cfg)?;
    Ok(hits
        .into_iter()
        .map(|c| c.triad)
        .filter(|t| {
            let equivalent = Field::ALL
                .iter()
                .all(|&f| dict.equivalent(source.get(f), t.get(f), f));
            let overlap = Field::ALL
                .iter()
                .any(|&f| tokenize(t.get(f)).iter().any(|x| src_tokens.contains(x)));
            !equivalent && overlap
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSchedule {
    pub total: usize,
    pub positive_fraction: f64,
    /// Shares of N1, N2, N3 among negatives.
    pub negative_fractions: [f64; 3],
    /// `(stage end as a fraction of total, share of hard negatives)`.
    pub hard_ramp: Vec<(f64, f64)>,
}

impl Default for GenerationSchedule {
    fn default() -> Self {
        GenerationSchedule {
            total: 200_000,
            positive_fraction: 0.5,
            negative_fractions: [1.0 / 3.0; 3],
            hard_ramp: vec![(1.0 / 3.0, 0.2), (1.0, 0.5)],
        }
    }
}

impl GenerationSchedule {
    pub fn with_total(total: usize) -> Self {
        GenerationSchedule {
            total,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("schedule: {m}")));
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad("positive fraction outside [0, 1]");
        }
        if self.negative_fractions.iter().any(|f| !(0.0..=1.0).contains(f))
            || (self.negative_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("negative fractions must be in [0, 1] and sum to 1");
        }
        if self.hard_ramp.is_empty() {
            return bad("empty hard-negative ramp");
        }
        let mut prev = (0.0, 0.0);
        for &(end, hard) in &self.hard_ramp {
            if end <= prev.0 || !(0.0..=1.0).contains(&hard) || hard < prev.1 {
                return bad("ramp stages must advance and hard shares must be non-decreasing in [0, 1]");
            }
            prev = (end, hard);
        }
        if (prev.0 - 1.0).abs() > 1e-9 {
            return bad("last ramp stage must end at 1");
        }
        Ok(())
    }

    fn class_weights(&self) -> [f64; 4] {
        let n = 1.0 - self.positive_fraction;
        [
            self.positive_fraction,
            n * self.negative_fractions[0],
            n * self.negative_fractions[1],
            n * self.negative_fractions[2],
        ]
    }

    fn hard_share_at(&self, position: f64) -> f64 {
        self.hard_ramp
            .iter()
            .find(|(end, _)| position < *end)
            .or(self.hard_ramp.last())
            .map_or(0.0, |s| s.1)
    }
}

const SHUFFLE_BLOCK: usize = 64;
const CHUNK: usize = 2048;

/// Class and difficulty for each position. Classes come from smooth weighted
/// round-robin (every prefix within one pair of its quota) shuffled inside
/// small blocks; hard negatives follow the ramp by exact accumulation.
pub fn plan(schedule: &GenerationSchedule, seed: u64) -> Result<Vec<(PairClass, Difficulty)>> {
    schedule.validate()?;
    let w = schedule.class_weights();
    let mut current = [0.0f64; 4];
    let mut classes: Vec<PairClass> = Vec::with_capacity(schedule.total);
    for _ in 0..schedule.total {
        for i in 0..4 {
            current[i] += w[i];
        }
        let mut pick = 0;
        for i in 1..4 {
            if current[i] > current[pick] + 1e-12 {
                pick = i;
            }
        }
        current[pick] -= 1.0;
        classes.push(PairClass::ALL[pick]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for block in classes.chunks_mut(SHUFFLE_BLOCK) {
        block.shuffle(&mut rng);
    }
    let mut acc = 0.0;
    let mut stage = f64::NAN;
    Ok(classes
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            if c == PairClass::Pos {
                return (c, Difficulty::Easy);
            }
            let h = schedule.hard_share_at(i as f64 / schedule.total as f64);
            if h != stage {
                stage = h;
                acc = 0.0;
            }
            acc += h;
            if acc >= 1.0 - 1e-12 {
                acc -= 1.0;
                (c, Difficulty::Hard)
            } else {
                (c, Difficulty::Easy)
            }
        })
        .collect())
}

pub struct PairFactory {
    pool: PairPool,
    dict: SynonymDictionary,
    neighbors: Option<Vec<Vec<Triad>>>,
}

impl PairFactory {
    pub fn new(pool: Vec<Triad>, dict: SynonymDictionary) -> Self {
        PairFactory {
            pool: PairPool::new(pool),
            dict,
            neighbors: None,
        }
    }

    pub fn pool(&self) -> &PairPool {
        &self.pool
    }

    pub fn dictionary(&self) -> &SynonymDictionary {
        &self.dict
    }

    /// Precomputes retrieved near-miss triads for every pool triad.
    pub fn with_retriever_neighbors(
        mut self,
        retriever: &Retriever,
        k: usize,
        weights: WeightVector,
    ) -> Result<Self> {
        let cfg = RetrievalConfig {
            weights,
            ..Default::default()
        };
        let n: Vec<Vec<Triad>> = self
            .pool
            .triads
            .par_iter()
            .map(|t| mine_hard_negatives(t, retriever, k, &cfg))
            .collect::<Result<_>>()?;
        self.neighbors = Some(n);
        Ok(self)
    }

    fn pick_replacement(
        &self,
        field: Field,
        source: &str,
        hard: Option<&[&str]>,
        rng: &mut impl Rng,
    ) -> Result<(String, bool)> {
        if let Some(cands) = hard {
            let ok: Vec<&str> = cands
                .iter()
                .copied()
                .filter(|v| !v.is_empty() && !self.dict.equivalent(source, v, field))
                .collect();
            if let Some(v) = ok.choose(rng) {
                return Ok((v.to_string(), true));
            }
        }
        let values = self.pool.values(field);
        if !values.is_empty() {
            for _ in 0..32 {
                let v = &values[rng.gen_range(0..values.len())];
                if !self.dict.equivalent(source, v, field) {
                    return Ok((v.clone(), false));
                }
            }
            let start = rng.gen_range(0..values.len());
            for i in 0..values.len() {
                let v = &values[(start + i) % values.len()];
                if !self.dict.equivalent(source, v, field) {
                    return Ok((v.clone(), false));
                }
            }
        }
        Err(Error::InsufficientPool(format!(
            "no {field} value outside the synonym group of '{source}'"
        )))
    }

    fn hard_candidates(&self, source: &Triad, source_idx: Option<usize>, field: Field) -> Vec<&str> {
        if let (Some(n), Some(i)) = (&self.neighbors, source_idx) {
            let mut v: Vec<&str> = n[i].iter().map(|t| t.get(field)).collect();
            v.sort_unstable();
            v.dedup();
            if !v.is_empty() {
                return v;
            }
        }
        self.pool.overlapping(field, source.get(field))
    }

    /// Corrupts the components of `class` with values outside the source's
    /// synonym groups. With `hard`, replacements come from near-miss values;
    /// the pair is labeled hard only if every replacement did.
    pub fn make_negative(
        &self,
        source: &Triad,
        class: PairClass,
        hard: bool,
        rng: &mut impl Rng,
    ) -> Result<LabeledPair> {
        self.negative_from(source, None, class, hard, rng)
    }

    fn negative_from(
        &self,
        source: &Triad,
        source_idx: Option<usize>,
        class: PairClass,
        hard: bool,
        rng: &mut impl Rng,
    ) -> Result<LabeledPair> {
        if class == PairClass::Pos {
            return Err(Error::Invalid("positive class passed to make_negative".into()));
        }
        if self.pool.count_outside(Field::Test, source.test(), &self.dict) < 2 {
            return Err(Error::InsufficientPool(format!(
                "fewer than 2 test names outside the synonym group of '{}'",
                source.test()
            )));
        }
        let mut right = source.clone();
        let mut all_hard = hard;
        for f in Field::ALL {
            if class.corrupted().contains(&f) {
                let cands = hard.then(|| self.hard_candidates(source, source_idx, f));
                let (v, was_hard) = self.pick_replacement(f, source.get(f), cands.as_deref(), rng)?;
                all_hard &= was_hard;
                right = right.with(f, &v)?;
            } else if rng.gen_bool(0.5) {
                if let Some(v) = synonym_variant(source.get(f), f, &self.dict, rng) {
                    right = right.with(f, &v)?;
                }
            }
        }
        Ok(LabeledPair {
            left: source.clone(),
            right,
            label: 0,
            class,
            difficulty: if all_hard { Difficulty::Hard } else { Difficulty::Easy },
        })
    }

    /// Generates `schedule.total` pairs. Work is split into fixed-size chunks,
    /// each with its own ChaCha stream derived from `seed`, so the output
    /// does not depend on the number of threads.
    pub fn generate_dataset(&self, schedule: &GenerationSchedule, seed: u64) -> Result<Vec<LabeledPair>> {
        if self.pool.triads.is_empty() {
            return Err(Error::InsufficientPool("empty pool".into()));
        }
        let plan = plan(schedule, seed)?;
        let chunks: Vec<Vec<LabeledPair>> = plan
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, slots)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(c as u64 + 1);
                slots
                    .iter()
                    .map(|&(class, difficulty)| {
                        let idx = rng.gen_range(0..self.pool.triads.len());
                        let source = &self.pool.triads[idx];
                        if class == PairClass::Pos {
                            Ok(make_positive(source, &self.dict, &mut rng))
                        } else {
                            self.negative_from(source, Some(idx), class, difficulty == Difficulty::Hard, &mut rng)
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Writes pairs as JSON lines; gzip-compressed when the path ends in `.gz`.
pub fn write_pairs(path: impl AsRef<Path>, pairs: &[LabeledPair]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut out: Box<dyn Write> = if is_gz(path) {
        Box::new(GzEncoder::new(BufWriter::new(file), Compression::default()))
    } else {
        Box::new(BufWriter::new(file))
    };
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<LabeledPair>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let reader: Box<dyn Read> = if is_gz(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
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

#[cfg(test)]
mod tests {
    use super::*;

    fn t(a: &str, b: &str, c: &str) -> Triad {
        Triad::new(a, b, c).unwrap()
    }

    fn factory() -> PairFactory {
        let pool = vec![
            t("hemoglobin", "blood", "g/dl"),
            t("glucose", "serum", "mg/dl"),
            t("glucose", "urine", "mg/dl"),
            t("sodium", "plasma", "mmol/l"),
            t("platelets", "blood", "10^3/ul"),
            t("potassium", "serum", "mmol/l"),
        ];
        PairFactory::new(pool, SynonymDictionary::seed())
    }

    #[test]
    fn positive_examples() {
        let d = SynonymDictionary::seed();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = make_positive(&t("hemoglobin", "blood", "g/dl"), &d, &mut rng);
            assert_eq!(p.label, 1);
            assert_ne!(p.left, p.right);
            verify_pair(&p, &d).unwrap();
        }
        let p = make_positive(&t("zzz", "", ""), &d, &mut rng);
        assert_eq!(p.left, p.right);
        assert_eq!(p.label, 1);
        // unit-only source: the unit must be the substituted component
        let p = make_positive(&t("zzz", "", "10^3/l"), &d, &mut rng);
        assert!(d.equivalent(p.right.unit(), "thou/l", Field::Unit));
        assert_ne!(p.right.unit(), "10^3/l");
    }

    #[test]
    fn negative_classes() {
        let f = factory();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = t("hemoglobin", "blood", "g/dl");
        for class in PairClass::NEGATIVE {
            for hard in [false, true] {
                let p = f.make_negative(&src, class, hard, &mut rng).unwrap();
                assert_eq!(p.label, 0);
                verify_pair(&p, f.dictionary()).unwrap();
            }
        }
    }

    #[test]
    fn insufficient_pool() {
        let f = PairFactory::new(vec![t("glucose", "serum", "mg/dl"), t("sodium", "serum", "mmol/l")], SynonymDictionary::seed());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = f.make_negative(&t("glucose", "serum", "mg/dl"), PairClass::N1, false, &mut rng);
        assert!(matches!(r, Err(Error::InsufficientPool(_))));
    }

    #[test]
    fn verify_rejects_mislabeled_pairs() {
        let d = SynonymDictionary::seed();
        let bad = LabeledPair {
            left: t("hemoglobin", "blood", "g/dl"),
            right: t("glucose", "blood", "g/dl"),
            label: 1,
            class: PairClass::Pos,
            difficulty: Difficulty::Easy,
        };
        assert!(verify_pair(&bad, &d).is_err());
        let bad = LabeledPair {
            label: 0,
            class: PairClass::N2,
            ..bad
        };
        assert!(verify_pair(&bad, &d).is_err());
    }

    #[test]
    fn plan_proportions_and_ramp() {
        let s = GenerationSchedule::with_total(30_000);
        let p = plan(&s, 5).unwrap();
        for prefix in [10_000, 20_000, 30_000] {
            let mut counts = [0usize; 4];
            for (c, _) in &p[..prefix] {
                counts[*c as usize] += 1;
            }
            let w = s.class_weights();
            for i in 0..4 {
                let share = counts[i] as f64 / prefix as f64;
                assert!((share - w[i]).abs() < 0.01, "class {i} at {prefix}: {share}");
            }
        }
        let hard_share = |range: std::ops::Range<usize>| {
            let neg: Vec<_> = p[range].iter().filter(|x| x.0 != PairClass::Pos).collect();
            neg.iter().filter(|x| x.1 == Difficulty::Hard).count() as f64 / neg.len() as f64
        };
        assert!((hard_share(0..10_000) - 0.2).abs() < 0.01);
        assert!((hard_share(10_000..30_000) - 0.5).abs() < 0.01);
    }

    #[test]
    fn schedule_validation() {
        let mut s = GenerationSchedule::default();
        s.hard_ramp = vec![(0.5, 0.6), (1.0, 0.2)];
        assert!(s.validate().is_err());
        s.hard_ramp = vec![(1.0, 0.2)];
        s.negative_fractions = [0.5, 0.5, 0.5];
        assert!(s.validate().is_err());
    }

    #[test]
    fn dataset_is_sound_and_round_trips() {
        let f = factory();
        let pairs = f.generate_dataset(&GenerationSchedule::with_total(3000), 9).unwrap();
        assert_eq!(pairs.len(), 3000);
        for p in &pairs {
            verify_pair(p, f.dictionary()).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        for name in ["p.jsonl", "p.jsonl.gz"] {
            let path = dir.path().join(name);
            write_pairs(&path, &pairs).unwrap();
            assert_eq!(read_pairs(&path).unwrap(), pairs);
        }
        let line = serde_json::to_string(&pairs[0]).unwrap();
        assert!(line.starts_with("{\"left\":{\"test\":"));
        assert!(line.contains("\"class\":"));
    }
}
