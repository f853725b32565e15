//! Domain types: triads, reference and query records, fusion weights, tags.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::normalize_text;

/// The three harmonization-critical fields of a laboratory entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Test,
    Sample,
    Unit,
}

impl Field {
    pub const ALL: [Field; 3] = [Field::Test, Field::Sample, Field::Unit];

    pub fn index(self) -> usize {
        match self {
            Field::Test => 0,
            Field::Sample => 1,
            Field::Unit => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Field::Test => "test",
            Field::Sample => "sample",
            Field::Unit => "unit",
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Field {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match normalize_text(s).as_str() {
            "test" => Ok(Field::Test),
            "sample" => Ok(Field::Sample),
            "unit" => Ok(Field::Unit),
            other => Err(Error::UnknownField(other.to_string())),
        }
    }
}

/// A (test, sample, unit) triple. Fields are stored normalized, so derived
/// equality is equality on normalized text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawTriad")]
pub struct Triad {
    test: String,
    sample: String,
    unit: String,
}

#[derive(Deserialize)]
struct RawTriad {
    test: String,
    #[serde(default)]
    sample: String,
    #[serde(default)]
    unit: String,
}

impl TryFrom<RawTriad> for Triad {
    type Error = Error;

    fn try_from(raw: RawTriad) -> Result<Self> {
        Triad::new(&raw.test, &raw.sample, &raw.unit)
    }
}

impl Triad {
    /// Normalizes all three fields. The test name must be non-empty afterwards.
    pub fn new(test: &str, sample: &str, unit: &str) -> Result<Self> {
        let test = normalize_text(test);
        if test.is_empty() {
            return Err(Error::Invalid("empty test".into()));
        }
        Ok(Triad {
            test,
            sample: normalize_text(sample),
            unit: normalize_text(unit),
        })
    }

    pub fn test(&self) -> &str {
        &self.test
    }

    pub fn sample(&self) -> &str {
        &self.sample
    }

    pub fn unit(&self) -> &str {
        &self.unit
    }

    pub fn get(&self, field: Field) -> &str {
        match field {
            Field::Test => &self.test,
            Field::Sample => &self.sample,
            Field::Unit => &self.unit,
        }
    }

    /// Returns a copy with one field replaced (normalized). Replacing the test
    /// name with an empty string is rejected.
    pub fn with(&self, field: Field, value: &str) -> Result<Self> {
        let mut t = self.clone();
        let v = normalize_text(value);
        match field {
            Field::Test => {
                if v.is_empty() {
                    return Err(Error::Invalid("empty test".into()));
                }
                t.test = v;
            }
            Field::Sample => t.sample = v,
            Field::Unit => t.unit = v,
        }
        Ok(t)
    }
}

impl fmt::Display for Triad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.test, self.sample, self.unit)
    }
}

/// An entry of the standardized reference database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub id: String,
    pub triad: Triad,
    pub labcode: String,
    pub preferred_unit: String,
    pub conversion_factor: f64,
    pub synonyms: Vec<String>,
}

impl ReferenceRecord {
    pub fn new(
        id: impl Into<String>,
        triad: Triad,
        labcode: impl Into<String>,
        preferred_unit: &str,
        conversion_factor: f64,
        synonyms: Vec<String>,
    ) -> Result<Self> {
        let id = id.into();
        if id.trim().is_empty() {
            return Err(Error::Invalid("empty record id".into()));
        }
        if !(conversion_factor.is_finite() && conversion_factor > 0.0) {
            return Err(Error::Invalid(format!(
                "record {id}: conversion factor must be > 0, got {conversion_factor}"
            )));
        }
        let synonyms = synonyms
            .iter()
            .map(|s| normalize_text(s))
            .filter(|s| !s.is_empty())
            .collect();
        Ok(ReferenceRecord {
            id,
            triad,
            labcode: labcode.into(),
            preferred_unit: normalize_text(preferred_unit),
            conversion_factor,
            synonyms,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

impl QueryStats {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.min, self.max, self.mean, self.std]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Invalid("non-finite stats".into()));
        }
        if self.std < 0.0 {
            return Err(Error::Invalid("negative std".into()));
        }
        if !(self.min <= self.mean && self.mean <= self.max) {
            return Err(Error::Invalid("stats violate min <= mean <= max".into()));
        }
        Ok(())
    }
}

/// A source triad awaiting harmonization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub triad: Triad,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_hint: Option<String>,
    #[serde(default)]
    pub frequency: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<QueryStats>,
}

impl QueryRecord {
    pub fn new(id: impl Into<String>, triad: Triad) -> Self {
        QueryRecord {
            id: id.into(),
            triad,
            code_hint: None,
            frequency: 0,
            stats: None,
        }
    }
}

/// Fusion parameters θ = [α, β, w_test, w_sample, w_unit].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights")]
pub struct WeightVector {
    pub alpha: f64,
    pub beta: f64,
    pub w_test: f64,
    pub w_sample: f64,
    pub w_unit: f64,
}

#[derive(Deserialize)]
struct RawWeights {
    alpha: f64,
    beta: f64,
    w_test: f64,
    w_sample: f64,
    w_unit: f64,
}

impl TryFrom<RawWeights> for WeightVector {
    type Error = Error;

    fn try_from(r: RawWeights) -> Result<Self> {
        WeightVector::new(r.alpha, r.beta, r.w_test, r.w_sample, r.w_unit)
    }
}

impl WeightVector {
    pub const MIX_MAX: f64 = 10.0;
    pub const FIELD_MAX: f64 = 5.0;

    pub fn new(alpha: f64, beta: f64, w_test: f64, w_sample: f64, w_unit: f64) -> Result<Self> {
        let w = WeightVector {
            alpha,
            beta,
            w_test,
            w_sample,
            w_unit,
        };
        w.validate()?;
        Ok(w)
    }

    /// Per-component `(lower, upper)` bounds in `to_array` order.
    pub fn bounds() -> [(f64, f64); 5] {
        [
            (0.0, Self::MIX_MAX),
            (0.0, Self::MIX_MAX),
            (0.0, Self::FIELD_MAX),
            (0.0, Self::FIELD_MAX),
            (0.0, Self::FIELD_MAX),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for ((name, v), (lo, hi)) in ["alpha", "beta", "w_test", "w_sample", "w_unit"]
            .iter()
            .zip(self.to_array())
            .zip(Self::bounds())
        {
            if !(v.is_finite() && v >= lo && v <= hi) {
                return Err(Error::Invalid(format!("{name}={v} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.alpha, self.beta, self.w_test, self.w_sample, self.w_unit]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            [a, b, t, s, u] => WeightVector::new(*a, *b, *t, *s, *u),
            _ => Err(Error::Invalid(format!("expected 5 weights, got {}", v.len()))),
        }
    }

    pub fn field_weights(&self) -> [f64; 3] {
        [self.w_test, self.w_sample, self.w_unit]
    }
}

impl Default for WeightVector {
    fn default() -> Self {
        WeightVector {
            alpha: 1.0,
            beta: 1.0,
            w_test: 1.0,
            w_sample: 1.0,
            w_unit: 1.0,
        }
    }
}

/// Workflow state of a harmonization decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "&'static str")]
pub enum TagStatus {
    Missing,
    Verified,
    Pending,
    Human,
    Copy,
    Reranked,
}

impl TagStatus {
    pub const ALL: [TagStatus; 6] = [
        TagStatus::Missing,
        TagStatus::Verified,
        TagStatus::Pending,
        TagStatus::Human,
        TagStatus::Copy,
        TagStatus::Reranked,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TagStatus::Missing => "Missing",
            TagStatus::Verified => "Verified",
            TagStatus::Pending => "Pending",
            TagStatus::Human => "Human",
            TagStatus::Copy => "Copy",
            TagStatus::Reranked => "Reranked",
        }
    }

    /// Tags that only a reviewer can assign.
    pub fn is_human(self) -> bool {
        matches!(self, TagStatus::Verified | TagStatus::Human)
    }
}

impl fmt::Display for TagStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TagStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TagStatus::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown tag status '{s}'")))
    }
}

impl TryFrom<String> for TagStatus {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TagStatus> for &'static str {
    fn from(t: TagStatus) -> Self {
        t.as_str()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triad_equality_is_on_normalized_fields() {
        let a = Triad::new(" Hemoglobin", "BLOOD", "g/dL").unwrap();
        let b = Triad::new("hemoglobin", "blood ", "G/DL").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.unit(), "g/dl");
    }

    #[test]
    fn triad_rejects_empty_test() {
        assert!(Triad::new("   ", "serum", "mg/dl").is_err());
        assert!(Triad::new("x", "", "").is_ok());
        assert!(serde_json::from_str::<Triad>(r#"{"test":"","sample":"a","unit":"b"}"#).is_err());
    }

    #[test]
    fn record_rejects_nonpositive_factor() {
        let t = Triad::new("glucose", "serum", "mg/dl").unwrap();
        assert!(ReferenceRecord::new("r1", t.clone(), "LC1", "mg/dl", 0.0, vec![]).is_err());
        assert!(ReferenceRecord::new("r1", t.clone(), "LC1", "mg/dl", -2.0, vec![]).is_err());
        assert!(ReferenceRecord::new("r1", t, "LC1", "mg/dl", 0.0555, vec![]).is_ok());
    }

    #[test]
    fn stats_invariants() {
        let ok = QueryStats { min: 1.0, max: 3.0, mean: 2.0, std: 0.5 };
        assert!(ok.validate().is_ok());
        assert!(QueryStats { std: -0.1, ..ok }.validate().is_err());
        assert!(QueryStats { mean: 4.0, ..ok }.validate().is_err());
    }

    #[test]
    fn weight_bounds() {
        assert!(WeightVector::new(10.0, 0.0, 5.0, 0.0, 2.5).is_ok());
        assert!(WeightVector::new(10.1, 0.0, 1.0, 1.0, 1.0).is_err());
        assert!(WeightVector::new(1.0, 1.0, 5.5, 1.0, 1.0).is_err());
        assert!(WeightVector::new(f64::NAN, 1.0, 1.0, 1.0, 1.0).is_err());
        let json = r#"{"alpha":11,"beta":1,"w_test":1,"w_sample":1,"w_unit":1}"#;
        assert!(serde_json::from_str::<WeightVector>(json).is_err());
    }

    #[test]
    fn tag_status_is_closed() {
        for t in TagStatus::ALL {
            assert_eq!(t.as_str().parse::<TagStatus>().unwrap(), t);
            let json = serde_json::to_string(&t).unwrap();
            assert_eq!(serde_json::from_str::<TagStatus>(&json).unwrap(), t);
        }
        assert!("verified".parse::<TagStatus>().is_err());
        assert!("Approved".parse::<TagStatus>().is_err());
        assert!(serde_json::from_str::<TagStatus>("\"Unknown\"").is_err());
    }

    #[test]
    fn field_parse() {
        assert_eq!("Unit".parse::<Field>().unwrap(), Field::Unit);
        assert!(matches!("labcode".parse::<Field>(), Err(Error::UnknownField(_))));
    }
}
