//! Synthetic reference databases and noisy query sets.
//!
//! Records combine an analyte (with its abbreviations), an optional
//! qualifier, a sample type and a unit. Queries are drawn from records and
//! corrupted the way local lab feeds tend to be: abbreviations (known and
//! ad hoc), typos, word order changes, sample/unit notation variants and
//! dropped fields.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Field, ReferenceRecord, Triad};
use crate::synonyms::SynonymDictionary;

#[derive(Clone, Copy)]
enum Samples {
    Chem,
    Blood,
    Heme,
    Coag,
    Urine,
    Csf,
}

impl Samples {
    fn values(self) -> &'static [&'static str] {
        match self {
            Samples::Chem => &["serum", "plasma", "serum/plasma", "urine", "24h urine"],
            Samples::Blood => &["blood", "venous blood", "arterial blood"],
            Samples::Heme => &["blood", "plasma", "csf"],
            Samples::Coag => &["plasma", "blood"],
            Samples::Urine => &["urine", "24h urine"],
            Samples::Csf => &["csf", "serum", "plasma"],
        }
    }
}

struct Analyte {
    name: &'static str,
    abbreviations: &'static [&'static str],
    samples: Samples,
    units: &'static [&'static str],
}

macro_rules! analytes {
    ($(($name:expr, [$($ab:expr),*], $s:ident, [$($u:expr),*])),* $(,)?) => {
        &[$(Analyte { name: $name, abbreviations: &[$($ab),*], samples: Samples::$s, units: &[$($u),*] }),*]
    };
}

const ANALYTES: &[Analyte] = analytes![
    ("glucose", ["glu", "gluc"], Chem, ["mg/dl", "mmol/l"]),
    ("sodium", ["na"], Chem, ["mmol/l", "meq/l"]),
    ("potassium", ["k"], Chem, ["mmol/l", "meq/l"]),
    ("chloride", ["cl"], Chem, ["mmol/l", "meq/l"]),
    ("bicarbonate", ["hco3", "co2"], Chem, ["mmol/l", "meq/l"]),
    ("creatinine", ["creat", "cr"], Chem, ["mg/dl", "umol/l"]),
    ("blood urea nitrogen", ["bun", "urea nitrogen"], Chem, ["mg/dl", "mmol/l"]),
    ("calcium", ["ca"], Chem, ["mg/dl", "mmol/l"]),
    ("magnesium", ["mag"], Chem, ["mg/dl", "mmol/l"]),
    ("phosphorus", ["phos", "po4"], Chem, ["mg/dl", "mmol/l"]),
    ("uric acid", ["urate"], Chem, ["mg/dl", "umol/l"]),
    ("albumin", ["alb"], Chem, ["g/dl", "g/l"]),
    ("total protein", ["tp", "protein total"], Chem, ["g/dl", "g/l"]),
    ("bilirubin", ["bili", "tbil"], Chem, ["mg/dl", "umol/l"]),
    ("alanine aminotransferase", ["alt", "sgpt"], Chem, ["u/l"]),
    ("aspartate aminotransferase", ["ast", "sgot"], Chem, ["u/l"]),
    ("alkaline phosphatase", ["alp", "alk phos"], Chem, ["u/l"]),
    ("gamma glutamyl transferase", ["ggt"], Chem, ["u/l"]),
    ("lactate dehydrogenase", ["ldh"], Chem, ["u/l"]),
    ("creatine kinase", ["ck", "cpk"], Chem, ["u/l"]),
    ("amylase", ["amy"], Chem, ["u/l"]),
    ("lipase", ["lip"], Chem, ["u/l"]),
    ("cholesterol", ["chol"], Chem, ["mg/dl", "mmol/l"]),
    ("triglycerides", ["trig", "tg"], Chem, ["mg/dl", "mmol/l"]),
    ("hdl cholesterol", ["hdl", "hdl-c"], Chem, ["mg/dl", "mmol/l"]),
    ("ldl cholesterol", ["ldl", "ldl-c"], Chem, ["mg/dl", "mmol/l"]),
    ("iron", ["fe"], Chem, ["ug/dl", "umol/l"]),
    ("ferritin", ["ferr"], Chem, ["ng/ml", "pmol/l"]),
    ("transferrin", ["trf"], Chem, ["mg/dl", "g/l"]),
    ("vitamin b12", ["b12", "cobalamin"], Chem, ["pg/ml", "pmol/l"]),
    ("folate", ["folic acid"], Chem, ["ng/ml", "nmol/l"]),
    ("vitamin d 25 hydroxy", ["25-oh vitamin d", "vit d"], Chem, ["ng/ml", "nmol/l"]),
    ("thyroid stimulating hormone", ["tsh", "thyrotropin"], Chem, ["uiu/ml", "miu/ml"]),
    ("thyroxine", ["t4"], Chem, ["ug/dl", "pmol/l"]),
    ("triiodothyronine", ["t3"], Chem, ["ng/dl", "pmol/l"]),
    ("cortisol", ["cort"], Chem, ["ug/dl", "nmol/l"]),
    ("testosterone", ["testo"], Chem, ["ng/dl", "nmol/l"]),
    ("estradiol", ["e2"], Chem, ["pg/ml", "pmol/l"]),
    ("prolactin", ["prl"], Chem, ["ng/ml", "miu/ml"]),
    ("prostate specific antigen", ["psa"], Chem, ["ng/ml"]),
    ("c reactive protein", ["crp"], Chem, ["mg/l", "mg/dl"]),
    ("troponin i", ["tni", "ctni"], Chem, ["ng/ml", "ng/l"]),
    ("troponin t", ["tnt", "ctnt"], Chem, ["ng/ml", "ng/l"]),
    ("natriuretic peptide b", ["bnp"], Chem, ["pg/ml"]),
    ("lactate", ["lactic acid"], Chem, ["mmol/l", "mg/dl"]),
    ("ammonia", ["nh3"], Chem, ["umol/l", "ug/dl"]),
    ("osmolality", ["osmo"], Chem, ["mosm/kg"]),
    ("hemoglobin a1c", ["hba1c", "a1c", "glycated hemoglobin"], Blood, ["%", "mmol/mol"]),
    ("hemoglobin", ["hgb", "hb"], Heme, ["g/dl", "g/l", "mmol/l"]),
    ("hematocrit", ["hct"], Heme, ["%"]),
    ("white blood cell count", ["wbc", "leukocytes"], Heme, ["10^3/ul", "10^9/l", "cells/ul"]),
    ("red blood cell count", ["rbc", "erythrocytes"], Heme, ["10^6/ul", "10^12/l", "cells/ul"]),
    ("platelet count", ["plt", "platelets"], Heme, ["10^3/ul", "10^9/l"]),
    ("mean corpuscular volume", ["mcv"], Heme, ["fl"]),
    ("mean corpuscular hemoglobin", ["mch"], Heme, ["pg"]),
    ("neutrophils", ["neut", "polys"], Heme, ["10^3/ul", "%"]),
    ("lymphocytes", ["lymph", "lymphs"], Heme, ["10^3/ul", "%"]),
    ("eosinophils", ["eos"], Heme, ["10^3/ul", "%"]),
    ("reticulocyte count", ["retic"], Heme, ["%", "10^9/l"]),
    ("prothrombin time", ["pt", "protime"], Coag, ["sec"]),
    ("international normalized ratio", ["inr"], Coag, ["ratio"]),
    ("partial thromboplastin time", ["ptt", "aptt"], Coag, ["sec"]),
    ("fibrinogen", ["fib"], Coag, ["mg/dl", "g/l"]),
    ("d-dimer", ["ddimer", "dimer"], Coag, ["ng/ml", "mg/l"]),
    ("ph", ["acidity"], Blood, ["ph"]),
    ("oxygen partial pressure", ["po2", "pao2"], Blood, ["mmhg"]),
    ("carbon dioxide partial pressure", ["pco2", "paco2"], Blood, ["mmhg"]),
    ("oxygen saturation", ["so2", "o2 sat"], Blood, ["%"]),
    ("microalbumin", ["malb", "urine albumin"], Urine, ["mg/l", "mg/g"]),
    ("urine protein", ["upro"], Urine, ["mg/dl", "mg/24h"]),
    ("specific gravity", ["sg", "sp gr"], Urine, ["ratio"]),
    ("oligoclonal bands", ["ocb"], Csf, ["titer"]),
    ("immunoglobulin g", ["igg"], Csf, ["mg/dl", "g/l"]),
];

const QUALIFIERS: &[&str] = &[
    "", "fasting", "random", "free", "total", "direct", "calculated", "point of care", "post dose",
    "baseline",
];

const METHODS: &[&str] = &[
    "", "by immunoassay", "by mass spectrometry", "by enzymatic method", "by ion selective electrode",
    "by chromatography", "by electrophoresis", "by colorimetry",
];

const TIMINGS: &[&str] = &["", "1 hour", "2 hour", "3 hour", "4 hour", "6 hour"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthQuery {
    pub id: String,
    pub triad: Triad,
    pub gold: String,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub records: Vec<ReferenceRecord>,
    pub validation: Vec<SynthQuery>,
    pub test: Vec<SynthQuery>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub records: usize,
    pub validation_queries: usize,
    pub test_queries: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            records: 2000,
            validation_queries: 500,
            test_queries: 500,
            seed: 7,
        }
    }
}

struct Spec {
    analyte: usize,
    qualifier: &'static str,
    method: &'static str,
    timing: &'static str,
    sample: &'static str,
    unit: &'static str,
}

fn join_words(parts: &[&str]) -> String {
    parts.iter().filter(|p| !p.is_empty()).copied().collect::<Vec<_>>().join(" ")
}

fn space(extended: bool) -> Vec<Spec> {
    let methods: &[&str] = if extended { METHODS } else { &[""] };
    let timings: &[&str] = if extended { TIMINGS } else { &[""] };
    let mut out = Vec::new();
    for (ai, a) in ANALYTES.iter().enumerate() {
        for &qualifier in QUALIFIERS {
            for &method in methods {
                for &timing in timings {
                    for &sample in a.samples.values() {
                        for &unit in a.units {
                            out.push(Spec {
                                analyte: ai,
                                qualifier,
                                method,
                                timing,
                                sample,
                                unit,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// `n` distinct reference records drawn deterministically from the
/// combination space. Beyond a few thousand records, method and timing
/// qualifiers are mixed in to keep records distinct.
pub fn generate_records(n: usize, seed: u64) -> Vec<ReferenceRecord> {
    let mut specs = space(false);
    if n > specs.len() {
        specs = space(true);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    specs.shuffle(&mut rng);
    specs.truncate(n);
    specs
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let a = &ANALYTES[s.analyte];
            let test = join_words(&[a.name, s.timing, s.qualifier, s.method]);
            let synonyms: Vec<String> = a
                .abbreviations
                .iter()
                .map(|ab| join_words(&[ab, s.timing, s.qualifier, s.method]))
                .collect();
            let triad = Triad::new(&test, s.sample, s.unit).expect("non-empty test");
            ReferenceRecord::new(
                format!("R{:06}", i + 1),
                triad,
                format!("{}-{}", 10000 + i, i % 10),
                s.unit,
                1.0,
                synonyms,
            )
            .expect("valid generated record")
        })
        .collect()
}

fn typo(word: &str, rng: &mut impl Rng) -> String {
    let mut c: Vec<char> = word.chars().collect();
    if c.len() < 4 {
        return word.to_string();
    }
    let i = rng.gen_range(1..c.len() - 1);
    match rng.gen_range(0..4) {
        0 => {
            c.remove(i);
        }
        1 => c.swap(i, i + 1),
        2 => c[i] = (b'a' + rng.gen_range(0..26u8)) as char,
        _ => c.insert(i, (b'a' + rng.gen_range(0..26u8)) as char),
    }
    c.into_iter().collect()
}

/// Ad hoc abbreviation that no dictionary knows: word prefixes or dropped
/// vowels.
fn ad_hoc_abbreviation(name: &str, rng: &mut impl Rng) -> String {
    if rng.gen_bool(0.5) {
        name.split_whitespace()
            .map(|w| {
                let n = w.chars().count();
                let keep = n.min(rng.gen_range(3..=5));
                w.chars().take(keep).collect::<String>()
            })
            .collect::<Vec<_>>()
            .join(" ")
    } else {
        name.split_whitespace()
            .map(|w| {
                let mut out = String::new();
                for (i, ch) in w.chars().enumerate() {
                    if i == 0 || !"aeiou".contains(ch) {
                        out.push(ch);
                    }
                }
                out
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn corrupt_test(record: &ReferenceRecord, spec_name: &str, rest: &str, rng: &mut impl Rng) -> String {
    let roll: f64 = rng.gen();
    let with_rest = |base: &str| join_words(&[base, rest]);
    if roll < 0.25 {
        record.triad.test().to_string()
    } else if roll < 0.45 {
        let ab: Vec<&String> = record.synonyms.iter().collect();
        ab.choose(rng).map_or_else(|| record.triad.test().to_string(), |s| s.to_string())
    } else if roll < 0.65 {
        let words: Vec<&str> = spec_name.split_whitespace().collect();
        let i = rng.gen_range(0..words.len());
        let mut w: Vec<String> = words.iter().map(|s| s.to_string()).collect();
        w[i] = typo(words[i], rng);
        with_rest(&w.join(" "))
    } else if roll < 0.85 {
        with_rest(&ad_hoc_abbreviation(spec_name, rng))
    } else {
        let noise = ["level", "lab", "result", "test", "quant"];
        if !rest.is_empty() && rng.gen_bool(0.5) {
            join_words(&[rest, spec_name])
        } else {
            join_words(&[spec_name, rest, noise.choose(rng).expect("non-empty")])
        }
    }
}

fn variant(value: &str, field: Field, dict: &SynonymDictionary, rng: &mut impl Rng) -> String {
    match dict.members(value, field) {
        Some(m) => {
            let others: Vec<&String> = m.iter().filter(|x| x.as_str() != value).collect();
            others.choose(rng).map_or_else(|| value.to_string(), |s| s.to_string())
        }
        None => value.to_string(),
    }
}

fn shout(s: &str, rng: &mut impl Rng) -> String {
    if rng.gen_bool(0.3) {
        s.to_uppercase()
    } else {
        s.to_string()
    }
}

/// A noisy query whose intended record is `record`.
pub fn corrupt_query(record: &ReferenceRecord, dict: &SynonymDictionary, rng: &mut impl Rng) -> Triad {
    let analyte = ANALYTES
        .iter()
        .filter(|a| record.triad.test().starts_with(a.name))
        .max_by_key(|a| a.name.len());
    let (name, rest) = match analyte {
        Some(a) => (a.name, record.triad.test()[a.name.len()..].trim()),
        None => (record.triad.test(), ""),
    };
    let test = corrupt_test(record, name, rest, rng);
    let sample = match rng.gen::<f64>() {
        r if r < 0.5 => record.triad.sample().to_string(),
        r if r < 0.8 => variant(record.triad.sample(), Field::Sample, dict, rng),
        _ => String::new(),
    };
    let unit = match rng.gen::<f64>() {
        r if r < 0.45 => record.triad.unit().to_string(),
        r if r < 0.85 => variant(record.triad.unit(), Field::Unit, dict, rng),
        _ => String::new(),
    };
    Triad::new(&shout(&test, rng), &shout(&sample, rng), &shout(&unit, rng))
        .unwrap_or_else(|_| record.triad.clone())
}

/// True when no other record is equally compatible with `query`: for every
/// other record sharing the gold test name, some field given in the query
/// tells the two apart (values not synonym-equivalent).
fn identifiable(query: &Triad, gold: &ReferenceRecord, same_test: &[&ReferenceRecord], dict: &SynonymDictionary) -> bool {
    same_test.iter().filter(|r| r.id != gold.id).all(|other| {
        [Field::Sample, Field::Unit].into_iter().any(|f| {
            !query.get(f).is_empty() && !dict.equivalent(gold.triad.get(f), other.triad.get(f), f)
        })
    })
}

const MAX_ATTEMPTS: usize = 16;

fn queries(records: &[ReferenceRecord], n: usize, prefix: &str, dict: &SynonymDictionary, rng: &mut impl Rng) -> Vec<SynthQuery> {
    let mut by_test: HashMap<&str, Vec<&ReferenceRecord>> = HashMap::new();
    for r in records {
        by_test.entry(r.triad.test()).or_default().push(r);
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let r = &records[rng.gen_range(0..records.len())];
        let same = &by_test[r.triad.test()];
        // records with a synonym-equivalent twin can never be told apart
        let found = (0..MAX_ATTEMPTS)
            .map(|_| corrupt_query(r, dict, rng))
            .find(|q| identifiable(q, r, same, dict));
        if let Some(triad) = found {
            out.push(SynthQuery {
                id: format!("{prefix}{:05}", out.len() + 1),
                triad,
                gold: r.id.clone(),
            });
        }
    }
    out
}

/// Reference records plus disjointly seeded validation and test queries.
pub fn generate_benchmark(cfg: &SynthConfig) -> Benchmark {
    let records = generate_records(cfg.records, cfg.seed);
    let dict = SynonymDictionary::seed();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let validation = queries(&records, cfg.validation_queries, "V", &dict, &mut rng);
    rng.set_stream(2);
    let test = queries(&records, cfg.test_queries, "Q", &dict, &mut rng);
    Benchmark {
        records,
        validation,
        test,
    }
}

/// Distinct triads of the records, for use as a pair-generation pool.
pub fn record_triads(records: &[ReferenceRecord]) -> Vec<Triad> {
    let mut seen = HashSet::new();
    records
        .iter()
        .filter(|r| seen.insert(r.triad.clone()))
        .map(|r| r.triad.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_are_distinct_and_deterministic() {
        let a = generate_records(2000, 3);
        let b = generate_records(2000, 3);
        assert_eq!(a.len(), 2000);
        assert_eq!(a, b);
        let triads: HashSet<&Triad> = a.iter().map(|r| &r.triad).collect();
        assert_eq!(triads.len(), 2000);
    }

    #[test]
    fn extended_space_reaches_large_sizes() {
        let n = space(true).len();
        assert!(n >= 100_000, "{n}");
    }

    #[test]
    fn queries_point_at_existing_records() {
        let b = generate_benchmark(&SynthConfig {
            records: 300,
            validation_queries: 50,
            test_queries: 50,
            seed: 1,
        });
        let ids: HashSet<&str> = b.records.iter().map(|r| r.id.as_str()).collect();
        for q in b.validation.iter().chain(&b.test) {
            assert!(ids.contains(q.gold.as_str()));
        }
        let changed = b.test.iter().filter(|q| {
            let r = b.records.iter().find(|r| r.id == q.gold).unwrap();
            r.triad != q.triad
        });
        assert!(changed.count() > 25);
    }

    #[test]
    fn dropped_fields_never_leave_the_gold_ambiguous() {
        let b = generate_benchmark(&SynthConfig {
            records: 800,
            validation_queries: 100,
            test_queries: 300,
            seed: 2,
        });
        let dict = SynonymDictionary::seed();
        let mut dropped = 0;
        for q in &b.test {
            let gold = b.records.iter().find(|r| r.id == q.gold).unwrap();
            if q.triad.sample().is_empty() || q.triad.unit().is_empty() {
                dropped += 1;
            }
            for other in b.records.iter().filter(|r| r.id != gold.id && r.triad.test() == gold.triad.test()) {
                let apart = [Field::Sample, Field::Unit].into_iter().any(|f| {
                    !q.triad.get(f).is_empty() && !dict.equivalent(gold.triad.get(f), other.triad.get(f), f)
                });
                assert!(apart, "{} vs {} for {}", gold.triad, other.triad, q.triad);
            }
        }
        assert!(dropped > 0);
    }
}
