//! Pairwise compatibility scoring and reranking of retrieval candidates.
//!
//! The shipped scorer is a logistic model over hand-built pair features,
//! trained with AdamW under a linear warmup/decay schedule. Anything that maps
//! an encoded pair to a probability can stand in for it through
//! [`CompatibilityScorer`], including an external service.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Stdio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fuzzy::{damerau_levenshtein, edits_for_length, MAX_EDITS};
use crate::model::{Field, TagStatus, Triad};
use crate::pairs::LabeledPair;
use crate::retriever::{normalize_candidate_scores, RankedCandidate};
use crate::semantic::{cosine_similarity, EmbeddingProvider, HashingEmbedder};
use crate::synonyms::SynonymDictionary;
use crate::text::tokenize;

pub const TOKEN_BUDGET: usize = 384;
pub const DEFAULT_LAMBDA: f64 = 0.3;

/// A query/candidate pair serialized as `<s> T1 </s></s> T2 </s>`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEncoding {
    pub text: String,
    pub left: Triad,
    pub right: Triad,
    pub truncated: bool,
}

fn count_tokens(s: &str) -> usize {
    s.split_whitespace().count()
}

fn truncate_words(s: &str, n: usize) -> String {
    s.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

/// Encodes a pair within `budget` whitespace tokens. When over budget the
/// longest field value is cut from its right end, repeatedly, so the markers
/// and all six field labels survive.
pub fn encode_pair_with_budget(query: &Triad, candidate: &Triad, budget: usize) -> PairEncoding {
    let render = |l: &[String; 6]| {
        format!(
            "<s> TEST: {} SAMPLE: {} UNIT: {} </s></s> TEST: {} SAMPLE: {} UNIT: {} </s>",
            l[0], l[1], l[2], l[3], l[4], l[5]
        )
    };
    let mut values: [String; 6] = [
        query.test().to_string(),
        query.sample().to_string(),
        query.unit().to_string(),
        candidate.test().to_string(),
        candidate.sample().to_string(),
        candidate.unit().to_string(),
    ];
    // markers: <s>, </s></s>, </s> plus six labels
    let fixed = 9;
    let mut lens: Vec<usize> = values.iter().map(|v| count_tokens(v)).collect();
    let mut truncated = false;
    while fixed + lens.iter().sum::<usize>() > budget {
        let (i, &l) = lens
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("six fields");
        if l == 0 {
            break;
        }
        lens[i] = l - 1;
        truncated = true;
    }
    if truncated {
        for (v, &l) in values.iter_mut().zip(&lens) {
            *v = truncate_words(v, l);
        }
    }
    PairEncoding {
        text: render(&values),
        left: query.clone(),
        right: candidate.clone(),
        truncated,
    }
}

pub fn encode_pair(query: &Triad, candidate: &Triad) -> PairEncoding {
    encode_pair_with_budget(query, candidate, TOKEN_BUDGET)
}

/// Maps an encoded pair to the probability that both sides denote the same
/// laboratory test.
pub trait CompatibilityScorer: Send + Sync {
    fn score(&self, pair: &PairEncoding) -> Result<f64>;

    fn score_batch(&self, pairs: &[PairEncoding]) -> Result<Vec<f64>> {
        pairs.iter().map(|p| self.score(p)).collect()
    }

    fn version(&self) -> String;
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_label(y: f64, eps: f64) -> f64 {
    y * (1.0 - eps) + eps / 2.0
}

/// Mean smoothed BCE from logits: `softplus(z) - ỹ·z` per example.
pub fn bce_from_logits(logits: &[f64], labels: &[u8], eps: f64) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::LengthMismatch(logits.len(), labels.len()));
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| softplus(z) - smooth_label(f64::from(y), eps) * z)
        .sum();
    Ok(sum / logits.len() as f64)
}

/// Mean smoothed BCE of probabilities, evaluated through their logits.
pub fn bce_loss(predictions: &[f64], labels: &[u8], eps: f64) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch(predictions.len(), labels.len()));
    }
    let logits: Vec<f64> = predictions
        .iter()
        .map(|&p| {
            let p = p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
            p.ln() - (-p).ln_1p()
        })
        .collect();
    bce_from_logits(&logits, labels, eps)
}

const EMBED_DIM: usize = 64;

pub const FEATURE_NAMES: [&str; 24] = [
    "test_jaccard",
    "test_edit",
    "test_synonym",
    "test_synonym_edit",
    "test_cosine",
    "test_one_missing",
    "sample_jaccard",
    "sample_edit",
    "sample_synonym",
    "sample_synonym_edit",
    "sample_cosine",
    "sample_one_missing",
    "unit_jaccard",
    "unit_edit",
    "unit_synonym",
    "unit_synonym_edit",
    "unit_cosine",
    "unit_one_missing",
    "min_synonym_edit",
    "mean_synonym",
    "all_synonym",
    "present_share",
    "test_cover_min",
    "test_cover_max",
];

pub const FEATURE_COUNT: usize = FEATURE_NAMES.len();

/// Similarity features, whose weights are kept non-negative during
/// training: more agreement between two triads never lowers compatibility.
pub fn is_similarity_feature(name: &str) -> bool {
    !(name.ends_with("one_missing") || name == "present_share")
}

fn edit_similarity(a: &str, b: &str) -> f64 {
    let n = a.chars().count().max(b.chars().count());
    if n == 0 {
        return 1.0;
    }
    1.0 - damerau_levenshtein(a, b) as f64 / n as f64
}

fn jaccard(a: &str, b: &str) -> f64 {
    let x: std::collections::HashSet<String> = tokenize(a).into_iter().collect();
    let y: std::collections::HashSet<String> = tokenize(b).into_iter().collect();
    let union = x.union(&y).count();
    if union == 0 {
        return 1.0;
    }
    x.intersection(&y).count() as f64 / union as f64
}

/// `short` reads as an abbreviation of `long`: same first letter and the
/// remaining letters appear in order.
fn abbreviates(short: &str, long: &str) -> bool {
    let mut l = long.chars();
    let mut s = short.chars();
    match (s.next(), l.next()) {
        (Some(a), Some(b)) if a == b => {}
        _ => return false,
    }
    s.all(|c| l.by_ref().any(|d| d == c))
}

fn token_matches(a: &str, b: &str) -> bool {
    if a == b {
        return true;
    }
    let (short, long) = if a.chars().count() <= b.chars().count() { (a, b) } else { (b, a) };
    if short.chars().count() >= 2 && abbreviates(short, long) {
        return true;
    }
    let n = a.chars().count().min(b.chars().count());
    let allowed = edits_for_length(n, MAX_EDITS);
    allowed > 0 && damerau_levenshtein(a, b) <= allowed
}

/// Share of `a`'s tokens matching some token of `b` (exactly, as an
/// abbreviation, or within the fuzzy edit budget).
fn token_cover(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let hit = a.iter().filter(|x| b.iter().any(|y| token_matches(x, y))).count();
    hit as f64 / a.len() as f64
}

/// Pair features for the reference scorer.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    dict: SynonymDictionary,
    embedder: HashingEmbedder,
}

impl FeatureExtractor {
    pub fn new(dict: SynonymDictionary) -> Self {
        FeatureExtractor {
            dict,
            embedder: HashingEmbedder::new(EMBED_DIM),
        }
    }

    pub fn dictionary(&self) -> &SynonymDictionary {
        &self.dict
    }

    /// Token coverage in both directions, taking the best over the synonym
    /// groups of either side.
    fn test_cover(dict: &SynonymDictionary, a: &str, b: &str) -> (f64, f64) {
        if a.is_empty() || b.is_empty() {
            return (0.0, 0.0);
        }
        let forms = |v: &str| -> Vec<Vec<String>> {
            let mut out = vec![tokenize(v)];
            if let Some(m) = dict.members(v, Field::Test) {
                out.extend(m.iter().filter(|x| x.as_str() != v).map(|x| tokenize(x)));
            }
            out
        };
        let (fa, fb) = (forms(a), forms(b));
        let mut best = (0.0f64, 0.0f64);
        for ta in &fa {
            for tb in &fb {
                let (x, y) = (token_cover(ta, tb), token_cover(tb, ta));
                let (lo, hi) = (x.min(y), x.max(y));
                if (lo, hi) > best {
                    best = (lo, hi);
                }
            }
        }
        best
    }

    fn synonym_edit(dict: &SynonymDictionary, a: &str, b: &str, field: Field) -> f64 {
        let mut best = edit_similarity(a, b);
        for side in [(a, b), (b, a)] {
            if let Some(members) = dict.members(side.1, field) {
                for m in members {
                    best = best.max(edit_similarity(side.0, m));
                }
            }
        }
        best
    }

    pub fn features(&self, left: &Triad, right: &Triad) -> Vec<f64> {
        self.features_with(&self.dict, left, right)
    }

    /// Features as seen by a scorer whose dictionary knows none of the test
    /// names (sample and unit vocabularies are small and closed).
    pub fn features_without_test_synonyms(&self, left: &Triad, right: &Triad) -> Vec<f64> {
        self.features_with(&SynonymDictionary::empty(), left, right)
    }

    fn features_with(&self, test_dict: &SynonymDictionary, left: &Triad, right: &Triad) -> Vec<f64> {
        let mut out = Vec::with_capacity(FEATURE_COUNT);
        let mut present = 0usize;
        let mut min_syn_edit: f64 = 1.0;
        let mut syn_sum = 0.0;
        for f in Field::ALL {
            let (a, b) = (left.get(f), right.get(f));
            if a.is_empty() != b.is_empty() {
                out.extend_from_slice(&[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
                continue;
            }
            let dict = if f == Field::Test { test_dict } else { &self.dict };
            let syn = f64::from(u8::from(dict.equivalent(a, b, f)));
            let syn_edit = Self::synonym_edit(dict, a, b, f);
            let cos = if a.is_empty() {
                1.0
            } else {
                let ea = self.embedder.embed(a).expect("hashing embedder is infallible");
                let eb = self.embedder.embed(b).expect("hashing embedder is infallible");
                cosine_similarity(&ea, &eb).unwrap_or(0.0).max(0.0)
            };
            out.extend_from_slice(&[jaccard(a, b), edit_similarity(a, b), syn, syn_edit, cos, 0.0]);
            if !a.is_empty() {
                present += 1;
                min_syn_edit = min_syn_edit.min(syn_edit);
                syn_sum += syn;
            }
        }
        let (mean_syn, all_syn) = if present == 0 {
            (0.0, 0.0)
        } else {
            let m = syn_sum / present as f64;
            (m, f64::from(u8::from(m == 1.0)))
        };
        out.extend_from_slice(&[
            if present == 0 { 0.0 } else { min_syn_edit },
            mean_syn,
            all_syn,
            present as f64 / 3.0,
        ]);
        let (lo, hi) = Self::test_cover(test_dict, left.test(), right.test());
        out.extend_from_slice(&[lo, hi]);
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub loss: f64,
    pub count: usize,
}

/// Accuracy, precision, recall and F1 at threshold 0.5.
pub fn classification_metrics(probs: &[f64], labels: &[u8]) -> Result<ClassificationMetrics> {
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch(probs.len(), labels.len()));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= 0.5, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = div(tp, tp + fp);
    let recall = div(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ClassificationMetrics {
        accuracy: div(tp + tn, probs.len()),
        precision,
        recall,
        f1,
        loss: bce_loss(probs, labels, 0.0)?,
        count: probs.len(),
    })
}

/// Logistic model weights as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub version: String,
    pub feature_names: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub trained_on: usize,
    #[serde(default)]
    pub metrics: Option<ClassificationMetrics>,
}

impl LinearModel {
    pub fn zeros() -> Self {
        LinearModel {
            version: "linear-v1".into(),
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            weights: vec![0.0; FEATURE_COUNT],
            bias: 0.0,
            trained_on: 0,
            metrics: None,
        }
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != FEATURE_COUNT || self.feature_names.len() != FEATURE_COUNT {
            return Err(Error::DimensionMismatch {
                expected: FEATURE_COUNT,
                actual: self.weights.len(),
            });
        }
        if self.feature_names.iter().zip(FEATURE_NAMES).any(|(a, b)| a != b) {
            return Err(Error::Invalid("model feature names do not match this build".into()));
        }
        if !self.bias.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Invalid("non-finite model weight".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let m: LinearModel = serde_json::from_str(&s)?;
        m.validate()?;
        Ok(m)
    }
}

/// Mean smoothed BCE and its gradient `(∂/∂w, ∂/∂b)` over a batch of
/// feature rows.
pub fn loss_and_gradient(
    model: &LinearModel,
    rows: &[&[f64]],
    labels: &[u8],
    eps: f64,
) -> Result<(f64, Vec<f64>, f64)> {
    if rows.len() != labels.len() {
        return Err(Error::LengthMismatch(rows.len(), labels.len()));
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = rows.len() as f64;
    let mut grad = vec![0.0; model.weights.len()];
    let mut gb = 0.0;
    let mut loss = 0.0;
    for (x, &y) in rows.iter().zip(labels) {
        let z = model.logit(x);
        let t = smooth_label(f64::from(y), eps);
        loss += softplus(z) - t * z;
        let d = sigmoid(z) - t;
        for (g, v) in grad.iter_mut().zip(x.iter()) {
            *g += d * v;
        }
        gb += d;
    }
    for g in &mut grad {
        *g /= n;
    }
    Ok((loss / n, grad, gb / n))
}

/// Scales `g` so its Euclidean norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradient(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for x in g.iter_mut() {
            *x *= s;
        }
    }
    norm
}

/// Piecewise-linear learning rate: warmup from 0 to `lr_max` over
/// `warmup` steps, then linear decay to 0 at step `total`.
pub fn learning_rate(step: usize, warmup: usize, total: usize, lr_max: f64) -> f64 {
    let t = step as f64;
    if step <= warmup {
        if warmup == 0 {
            return lr_max;
        }
        lr_max * t / warmup as f64
    } else if step >= total {
        0.0
    } else {
        lr_max * (total - step) as f64 / (total - warmup) as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub warmup_fraction: f64,
    pub max_grad_norm: f64,
    pub label_smoothing: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub validation_fraction: f64,
    /// Validation checks per epoch (checkpoints keep the best F1, ties
    /// going to the lower validation loss).
    pub evals_per_epoch: usize,
    /// Share of training pairs whose test-name features are computed without
    /// the dictionary, so the model also learns from surface similarity.
    #[serde(default)]
    pub dictionary_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-2,
            warmup_fraction: 0.1,
            max_grad_norm: 1.0,
            label_smoothing: 0.0,
            epochs: 1,
            batch_size: 64,
            weight_decay: 0.01,
            validation_fraction: 0.05,
            evals_per_epoch: 10,
            dictionary_dropout: 0.3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("train config: {m}")));
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return bad("lr_max must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup fraction must be in [0, 1)");
        }
        if !(0.0..=0.2).contains(&self.label_smoothing) {
            return bad("label smoothing must be in [0, 0.2]");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation fraction must be in [0, 1)");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max gradient norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.dictionary_dropout) {
            return bad("dictionary dropout must be in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub validation: Option<ClassificationMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingReport {
    pub note: String,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub train_pairs: usize,
    pub validation_pairs: usize,
    pub curve: Vec<LossPoint>,
    pub max_raw_grad_norm: f64,
    pub max_applied_grad_norm: f64,
    pub best_step: usize,
    pub validation: ClassificationMetrics,
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// `params[i]` gets decoupled weight decay only where `decay[i]`.
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, wd: f64, decay: &[bool]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            if decay[i] {
                params[i] -= lr * wd * params[i];
            }
            params[i] -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Reference scorer: features → logistic model.
#[derive(Debug, Clone)]
pub struct ReferenceScorer {
    extractor: FeatureExtractor,
    model: LinearModel,
}

impl ReferenceScorer {
    pub fn new(dict: SynonymDictionary, model: LinearModel) -> Result<Self> {
        model.validate()?;
        Ok(ReferenceScorer {
            extractor: FeatureExtractor::new(dict),
            model,
        })
    }

    pub fn model(&self) -> &LinearModel {
        &self.model
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn probability(&self, left: &Triad, right: &Triad) -> f64 {
        sigmoid(self.model.logit(&self.extractor.features(left, right)))
    }

    /// Trains on `pairs` in stream order (so a difficulty ramp in the input
    /// is preserved); every `1/validation_fraction`-th pair is held out.
    pub fn train(
        dict: SynonymDictionary,
        pairs: &[LabeledPair],
        cfg: &TrainConfig,
    ) -> Result<(ReferenceScorer, TrainingReport)> {
        cfg.validate()?;
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let extractor = FeatureExtractor::new(dict);
        let stride = if cfg.validation_fraction > 0.0 {
            (1.0 / cfg.validation_fraction).round().max(2.0) as usize
        } else {
            usize::MAX
        };
        let is_val = |i: usize| stride != usize::MAX && i % stride == stride - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let masked: Vec<bool> = (0..pairs.len())
            .map(|i| rng.gen::<f64>() < cfg.dictionary_dropout && !is_val(i))
            .collect();
        let rows: Vec<Vec<f64>> = pairs
            .par_iter()
            .zip(&masked)
            .map(|(p, &m)| {
                if m {
                    extractor.features_without_test_synonyms(&p.left, &p.right)
                } else {
                    extractor.features(&p.left, &p.right)
                }
            })
            .collect();
        let (mut train_idx, mut val_idx) = (Vec::new(), Vec::new());
        for i in 0..pairs.len() {
            if is_val(i) {
                val_idx.push(i);
            } else {
                train_idx.push(i);
            }
        }
        if train_idx.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
        let total = steps_per_epoch * cfg.epochs;
        let warmup = ((total as f64) * cfg.warmup_fraction).floor() as usize;
        let eval_every = (steps_per_epoch / cfg.evals_per_epoch.max(1)).max(1);

        let evaluate = |m: &LinearModel| -> Result<Option<ClassificationMetrics>> {
            if val_idx.is_empty() {
                return Ok(None);
            }
            let probs: Vec<f64> = val_idx.iter().map(|&i| sigmoid(m.logit(&rows[i]))).collect();
            let labels: Vec<u8> = val_idx.iter().map(|&i| pairs[i].label).collect();
            classification_metrics(&probs, &labels).map(Some)
        };

        let mut model = LinearModel::zeros();
        let n_params = FEATURE_COUNT + 1;
        let mut decay = vec![true; n_params];
        decay[FEATURE_COUNT] = false;
        let mut opt = AdamW::new(n_params);
        let monotone: Vec<bool> = FEATURE_NAMES.iter().map(|n| is_similarity_feature(n)).collect();
        let mut params = vec![0.0; n_params];
        let mut curve = Vec::new();
        let mut best: Option<(f64, usize, LinearModel, ClassificationMetrics)> = None;
        let (mut max_raw, mut max_applied) = (0.0f64, 0.0f64);
        let mut window = (0.0, 0usize);
        let mut step = 0usize;

        for _epoch in 0..cfg.epochs {
            for batch in train_idx.chunks(cfg.batch_size) {
                step += 1;
                let x: Vec<&[f64]> = batch.iter().map(|&i| rows[i].as_slice()).collect();
                let y: Vec<u8> = batch.iter().map(|&i| pairs[i].label).collect();
                let (loss, gw, gb) = loss_and_gradient(&model, &x, &y, cfg.label_smoothing)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { step, loss });
                }
                let mut g = gw;
                g.push(gb);
                let raw = clip_gradient(&mut g, cfg.max_grad_norm);
                max_raw = max_raw.max(raw);
                max_applied = max_applied.max(g.iter().map(|v| v * v).sum::<f64>().sqrt());
                let lr = learning_rate(step, warmup, total, cfg.lr_max);
                opt.step(&mut params, &g, lr, cfg.weight_decay, &decay);
                for (p, &m) in params.iter_mut().zip(&monotone) {
                    if m && *p < 0.0 {
                        *p = 0.0;
                    }
                }
                model.weights.copy_from_slice(&params[..FEATURE_COUNT]);
                model.bias = params[FEATURE_COUNT];
                window.0 += loss;
                window.1 += 1;
                if step % eval_every == 0 || step == total {
                    let val = evaluate(&model)?;
                    curve.push(LossPoint {
                        step,
                        lr,
                        train_loss: window.0 / window.1 as f64,
                        validation: val.clone(),
                    });
                    window = (0.0, 0);
                    if let Some(v) = val {
                        let improves = best.as_ref().map_or(true, |b| {
                            v.f1 > b.0 || (v.f1 == b.0 && v.loss < b.3.loss)
                        });
                        if improves {
                            best = Some((v.f1, step, model.clone(), v));
                        }
                    }
                }
            }
        }
        let (best_step, mut model, validation) = match best {
            Some((_, s, m, v)) => (s, m, v),
            None => (step, model, ClassificationMetrics::default()),
        };
        model.trained_on = train_idx.len();
        model.metrics = Some(validation.clone());
        let report = TrainingReport {
            note: format!(
                "linear reference scorer; lr_max {} (raised from the 1e-5 used for large transformer fine-tuning)",
                cfg.lr_max
            ),
            total_steps: total,
            warmup_steps: warmup,
            train_pairs: train_idx.len(),
            validation_pairs: val_idx.len(),
            curve,
            max_raw_grad_norm: max_raw,
            max_applied_grad_norm: max_applied,
            best_step,
            validation,
        };
        Ok((
            ReferenceScorer {
                extractor,
                model,
            },
            report,
        ))
    }
}

impl CompatibilityScorer for ReferenceScorer {
    fn score(&self, pair: &PairEncoding) -> Result<f64> {
        Ok(self.probability(&pair.left, &pair.right))
    }

    fn score_batch(&self, pairs: &[PairEncoding]) -> Result<Vec<f64>> {
        Ok(pairs.iter().map(|p| self.probability(&p.left, &p.right)).collect())
    }

    fn version(&self) -> String {
        format!("reference/{}", self.model.version)
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    pair_id: String,
    left: &'a Triad,
    right: &'a Triad,
}

#[derive(Deserialize)]
struct WireResponse {
    pair_id: String,
    p: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExternalTransport {
    /// A command that reads request lines on stdin and writes response lines.
    Stdio { command: String, args: Vec<String> },
    /// Base URL of a service exposing `POST /score`.
    Http { url: String },
}

/// Scores pairs through an external service speaking JSON lines
/// (`{pair_id, left, right}` in, `{pair_id, p}` out).
#[derive(Debug, Clone)]
pub struct ExternalScorer {
    transport: ExternalTransport,
}

impl ExternalScorer {
    pub fn new(transport: ExternalTransport) -> Self {
        ExternalScorer { transport }
    }

    fn request_body(pairs: &[PairEncoding]) -> Result<String> {
        let mut body = String::new();
        for (i, p) in pairs.iter().enumerate() {
            body.push_str(&serde_json::to_string(&WireRequest {
                pair_id: i.to_string(),
                left: &p.left,
                right: &p.right,
            })?);
            body.push('\n');
        }
        Ok(body)
    }

    fn parse_response(n: usize, text: &str) -> Result<Vec<f64>> {
        let mut got: HashMap<String, f64> = HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: WireResponse = serde_json::from_str(line)
                .map_err(|e| Error::External(format!("bad response line: {e}")))?;
            if !(0.0..=1.0).contains(&r.p) {
                return Err(Error::External(format!("probability {} out of range", r.p)));
            }
            got.insert(r.pair_id, r.p);
        }
        (0..n)
            .map(|i| {
                got.get(&i.to_string())
                    .copied()
                    .ok_or_else(|| Error::External(format!("no score for pair {i}")))
            })
            .collect()
    }
}

impl CompatibilityScorer for ExternalScorer {
    fn score(&self, pair: &PairEncoding) -> Result<f64> {
        Ok(self.score_batch(std::slice::from_ref(pair))?[0])
    }

    fn score_batch(&self, pairs: &[PairEncoding]) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let body = Self::request_body(pairs)?;
        let text = match &self.transport {
            ExternalTransport::Stdio { command, args } => {
                let mut child = Command::new(command)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(|e| Error::External(format!("spawn {command}: {e}")))?;
                {
                    let mut stdin = child.stdin.take().expect("piped stdin");
                    stdin.write_all(body.as_bytes())?;
                }
                let mut out = String::new();
                let stdout = child.stdout.take().expect("piped stdout");
                for line in BufReader::new(stdout).lines() {
                    out.push_str(&line?);
                    out.push('\n');
                }
                let status = child.wait()?;
                if !status.success() {
                    return Err(Error::External(format!("{command} exited with {status}")));
                }
                out
            }
            ExternalTransport::Http { url } => {
                let endpoint = format!("{}/score", url.trim_end_matches('/'));
                ureq::post(&endpoint)
                    .set("Content-Type", "application/x-ndjson")
                    .send_string(&body)
                    .map_err(|e| Error::External(e.to_string()))?
                    .into_string()
                    .map_err(|e| Error::External(e.to_string()))?
            }
        };
        Self::parse_response(pairs.len(), &text)
    }

    fn version(&self) -> String {
        match &self.transport {
            ExternalTransport::Stdio { command, .. } => format!("external/stdio/{command}"),
            ExternalTransport::Http { url } => format!("external/http/{url}"),
        }
    }
}

/// Annotates candidates with the scorer probability and
/// `final = λ·retrieval_norm + (1-λ)·p`, then re-sorts by final score
/// (descending, ties by id) and renumbers ranks.
pub fn rerank(
    query: &Triad,
    candidates: &[RankedCandidate],
    scorer: &dyn CompatibilityScorer,
    lambda: f64,
) -> Result<Vec<RankedCandidate>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidateList);
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let mut out = candidates.to_vec();
    if out.iter().any(|c| c.retrieval_norm.is_none()) {
        normalize_candidate_scores(&mut out)?;
    }
    let encodings: Vec<PairEncoding> = out.iter().map(|c| encode_pair(query, &c.triad)).collect();
    let probs = scorer.score_batch(&encodings)?;
    for (c, p) in out.iter_mut().zip(probs) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::External(format!("scorer returned {p}")));
        }
        let norm = c.retrieval_norm.unwrap_or(0.0);
        c.rerank_score = Some(p);
        c.final_score = Some(lambda * norm + (1.0 - lambda) * p);
    }
    out.sort_by(|a, b| {
        b.final_score
            .unwrap_or(0.0)
            .total_cmp(&a.final_score.unwrap_or(0.0))
            .then_with(|| a.id.cmp(&b.id))
    });
    for (i, c) in out.iter_mut().enumerate() {
        c.rank = i + 1;
    }
    Ok(out)
}

/// Promotes the reranked top candidate over the retrieval top-1 when they
/// differ and its probability is higher (tag `Reranked`); otherwise returns
/// the retrieval order (tag `Pending`). Both lists must carry
/// `rerank_score`.
pub fn override_top1(
    original: &[RankedCandidate],
    reranked: &[RankedCandidate],
) -> (Vec<RankedCandidate>, TagStatus) {
    let annotated: HashMap<&str, &RankedCandidate> =
        reranked.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut base: Vec<RankedCandidate> = original
        .iter()
        .map(|c| annotated.get(c.id.as_str()).map_or_else(|| c.clone(), |r| (*r).clone()))
        .collect();
    let (Some(top), Some(cand)) = (base.first(), reranked.first()) else {
        return (base, TagStatus::Pending);
    };
    let p_top = top.rerank_score.unwrap_or(0.0);
    let p_cand = cand.rerank_score.unwrap_or(0.0);
    let tag = if cand.id != top.id && p_cand > p_top {
        let pos = base.iter().position(|c| c.id == cand.id);
        if let Some(pos) = pos {
            let c = base.remove(pos);
            base.insert(0, c);
        }
        TagStatus::Reranked
    } else {
        TagStatus::Pending
    };
    for (i, c) in base.iter_mut().enumerate() {
        c.rank = i + 1;
    }
    (base, tag)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankConfig {
    pub lambda: f64,
    pub fusion: bool,
    pub override_top1: bool,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            lambda: DEFAULT_LAMBDA,
            fusion: true,
            override_top1: true,
        }
    }
}

/// Which rule decided the final order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankRule {
    Retrieval,
    Fusion,
    Override,
}

/// λ-fusion then (optionally) the top-1 override, as configured. With fusion
/// off the scorer order alone (λ = 0) is used as the reranked list.
pub fn apply_reranker(
    query: &Triad,
    candidates: &[RankedCandidate],
    scorer: &dyn CompatibilityScorer,
    cfg: &RerankConfig,
) -> Result<(Vec<RankedCandidate>, TagStatus, RerankRule)> {
    let lambda = if cfg.fusion { cfg.lambda } else { 0.0 };
    let reranked = rerank(query, candidates, scorer, lambda)?;
    if cfg.override_top1 {
        let (list, tag) = override_top1(candidates, &reranked);
        let rule = if tag == TagStatus::Reranked {
            RerankRule::Override
        } else {
            RerankRule::Retrieval
        };
        return Ok((list, tag, rule));
    }
    if cfg.fusion {
        let tag = if reranked[0].id != candidates[0].id {
            TagStatus::Reranked
        } else {
            TagStatus::Pending
        };
        return Ok((reranked, tag, RerankRule::Fusion));
    }
    let annotated: HashMap<&str, &RankedCandidate> = reranked.iter().map(|c| (c.id.as_str(), c)).collect();
    let list = candidates
        .iter()
        .map(|c| {
            let mut r = (*annotated[c.id.as_str()]).clone();
            r.rank = c.rank;
            r
        })
        .collect();
    Ok((list, TagStatus::Pending, RerankRule::Retrieval))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairs::{GenerationSchedule, PairFactory};

    fn t(a: &str, b: &str, c: &str) -> Triad {
        Triad::new(a, b, c).unwrap()
    }

    fn cand(id: &str, fused: f64) -> RankedCandidate {
        RankedCandidate {
            id: id.into(),
            triad: t(id, "", ""),
            rank: 0,
            lexical_score: fused,
            field_scores: [fused, 0.0, 0.0],
            semantic_score: 0.0,
            fused_score: fused,
            retrieval_norm: None,
            rerank_score: None,
            final_score: None,
        }
    }

    /// Scores by a fixed table keyed on the candidate test name.
    struct TableScorer(HashMap<String, f64>);

    impl CompatibilityScorer for TableScorer {
        fn score(&self, pair: &PairEncoding) -> Result<f64> {
            Ok(self.0[pair.right.test()])
        }
        fn version(&self) -> String {
            "table".into()
        }
    }

    fn table(entries: &[(&str, f64)]) -> TableScorer {
        TableScorer(entries.iter().map(|(k, v)| (k.to_string(), *v)).collect())
    }

    #[test]
    fn encoding_template() {
        let e = encode_pair(&t("hemoglobin", "blood", "g/dl"), &t("HGB", "blood", "g/dL"));
        assert_eq!(
            e.text,
            "<s> TEST: hemoglobin SAMPLE: blood UNIT: g/dl </s></s> TEST: hgb SAMPLE: blood UNIT: g/dl </s>"
        );
        let e = encode_pair(&t("x", "", "y"), &t("x", "", "y"));
        assert!(e.text.contains("SAMPLE:  UNIT: y"));
    }

    #[test]
    fn encoding_truncates_longest_field() {
        let long = vec!["word"; 500].join(" ");
        let e = encode_pair(&t(&long, "serum", "mg/dl"), &t("glucose", "serum", "mg/dl"));
        assert!(e.truncated);
        assert!(e.text.split_whitespace().count() <= TOKEN_BUDGET);
        assert_eq!(e.text.matches("</s></s>").count(), 1);
        assert_eq!(e.text.matches("TEST:").count(), 2);
        assert!(e.text.ends_with(" </s>"));
        assert!(e.text.contains("TEST: glucose SAMPLE: serum UNIT: mg/dl </s>"));
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[0.5], &[1], 0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let want = -(0.95f64 * 0.95f64.ln() + 0.05 * 0.05f64.ln());
        assert!((bce_loss(&[0.95], &[1], 0.1).unwrap() - want).abs() < 1e-12);
        assert!((bce_loss(&[0.95], &[1], 0.1).unwrap() - 0.19851524334587255643).abs() < 1e-12);
        assert!(bce_loss(&[1.0 - 1e-12], &[1], 0.0).unwrap() < 1e-11);
        assert!(matches!(bce_loss(&[0.5], &[1, 0], 0.0), Err(Error::LengthMismatch(1, 2))));
        // large logits stay finite
        assert!(bce_from_logits(&[800.0, -800.0], &[0, 1], 0.0).unwrap().is_finite());
    }

    #[test]
    fn schedule_and_clipping() {
        assert_eq!(learning_rate(10, 10, 100, 0.01), 0.01);
        assert_eq!(learning_rate(100, 10, 100, 0.01), 0.0);
        assert!((learning_rate(5, 10, 100, 0.01) - 0.005).abs() < 1e-15);
        assert!((learning_rate(55, 10, 100, 0.01) - 0.005).abs() < 1e-15);
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_gradient(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut g = vec![0.3, 0.4];
        clip_gradient(&mut g, 1.0);
        assert_eq!(g, vec![0.3, 0.4]);
    }

    #[test]
    fn rerank_fusion_arithmetic_and_projections() {
        let mut cands = vec![cand("a", 4.0), cand("b", 2.0), cand("c", 0.0)];
        normalize_candidate_scores(&mut cands).unwrap();
        let s = table(&[("a", 0.5), ("b", 0.9), ("c", 0.95)]);
        let q = t("q", "", "");
        let r = rerank(&q, &cands, &s, 0.3).unwrap();
        let a = r.iter().find(|c| c.id == "a").unwrap();
        assert!((a.final_score.unwrap() - 0.65).abs() < 1e-12);
        let keep = rerank(&q, &cands, &s, 1.0).unwrap();
        assert_eq!(keep.iter().map(|c| c.id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        let by_p = rerank(&q, &cands, &s, 0.0).unwrap();
        assert_eq!(by_p.iter().map(|c| c.id.as_str()).collect::<Vec<_>>(), ["c", "b", "a"]);
        assert!(matches!(rerank(&q, &[], &s, 0.3), Err(Error::EmptyCandidateList)));
    }

    #[test]
    fn override_rule() {
        let mut cands = vec![cand("a", 4.0), cand("b", 2.0), cand("c", 1.0)];
        normalize_candidate_scores(&mut cands).unwrap();
        let q = t("q", "", "");

        let agree = table(&[("a", 0.9), ("b", 0.2), ("c", 0.1)]);
        let rr = rerank(&q, &cands, &agree, 0.3).unwrap();
        let (list, tag) = override_top1(&cands, &rr);
        assert_eq!(tag, TagStatus::Pending);
        assert_eq!(list.iter().map(|c| c.id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);

        let prefers_c = table(&[("a", 0.2), ("b", 0.3), ("c", 0.99)]);
        let rr = rerank(&q, &cands, &prefers_c, 0.0).unwrap();
        let (list, tag) = override_top1(&cands, &rr);
        assert_eq!(tag, TagStatus::Reranked);
        assert_eq!(list.iter().map(|c| c.id.as_str()).collect::<Vec<_>>(), ["c", "a", "b"]);
        assert_eq!(list.iter().map(|c| c.rank).collect::<Vec<_>>(), [1, 2, 3]);

        let single = vec![cands[0].clone()];
        let rr = rerank(&q, &single, &prefers_c, 0.3).unwrap();
        assert_eq!(override_top1(&single, &rr).1, TagStatus::Pending);
    }

    #[test]
    fn features_have_fixed_length() {
        let fx = FeatureExtractor::new(SynonymDictionary::seed());
        let f = fx.features(&t("hemoglobin", "blood", "g/dl"), &t("hgb", "", "g/dl"));
        assert_eq!(f.len(), FEATURE_COUNT);
        assert_eq!(f[2], 1.0); // test synonym hit
        assert_eq!(f[11], 1.0); // sample missing on one side
        assert!(f.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let fx = FeatureExtractor::new(SynonymDictionary::seed());
        let pool = vec![
            t("hemoglobin", "blood", "g/dl"),
            t("glucose", "serum", "mg/dl"),
            t("sodium", "plasma", "mmol/l"),
            t("platelets", "blood", "10^3/ul"),
        ];
        let pairs = PairFactory::new(pool, SynonymDictionary::seed())
            .generate_dataset(&GenerationSchedule::with_total(40), 4)
            .unwrap();
        let rows: Vec<Vec<f64>> = pairs.iter().map(|p| fx.features(&p.left, &p.right)).collect();
        let x: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let y: Vec<u8> = pairs.iter().map(|p| p.label).collect();
        let mut m = LinearModel::zeros();
        for (i, w) in m.weights.iter_mut().enumerate() {
            *w = ((i * 7919) % 13) as f64 / 10.0 - 0.6;
        }
        m.bias = 0.2;
        let (_, gw, gb) = loss_and_gradient(&m, &x, &y, 0.1).unwrap();
        let h = 1e-6;
        for i in 0..=FEATURE_COUNT {
            let mut plus = m.clone();
            let mut minus = m.clone();
            if i < FEATURE_COUNT {
                plus.weights[i] += h;
                minus.weights[i] -= h;
            } else {
                plus.bias += h;
                minus.bias -= h;
            }
            let lp = loss_and_gradient(&plus, &x, &y, 0.1).unwrap().0;
            let lm = loss_and_gradient(&minus, &x, &y, 0.1).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let an = if i < FEATURE_COUNT { gw[i] } else { gb };
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "param {i}: {fd} vs {an}");
        }
    }

    #[test]
    fn training_separates_classes() {
        let pool = vec![
            t("hemoglobin", "blood", "g/dl"),
            t("glucose", "serum", "mg/dl"),
            t("glucose", "urine", "mg/dl"),
            t("sodium", "plasma", "mmol/l"),
            t("potassium", "serum", "mmol/l"),
            t("platelets", "blood", "10^3/ul"),
            t("blood urea nitrogen", "serum", "mg/dl"),
        ];
        let dict = SynonymDictionary::seed();
        let pairs = PairFactory::new(pool, dict.clone())
            .generate_dataset(&GenerationSchedule::with_total(4000), 8)
            .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let (scorer, report) = ReferenceScorer::train(dict, &pairs, &cfg).unwrap();
        assert!(report.validation.f1 > 0.9, "{:?}", report.validation);
        assert!(report.max_applied_grad_norm <= 1.0 + 1e-12);
        let p_pos = scorer.probability(&t("hemoglobin", "blood", "g/dl"), &t("hgb", "blood", "g/dl"));
        let p_neg = scorer.probability(&t("hemoglobin", "blood", "g/dl"), &t("sodium", "plasma", "mmol/l"));
        assert!(p_pos > p_neg + 0.3, "{p_pos} vs {p_neg}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        scorer.model().save(&path).unwrap();
        assert_eq!(&LinearModel::load(&path).unwrap(), scorer.model());
    }

    #[test]
    fn training_rejects_empty_input() {
        let r = ReferenceScorer::train(SynonymDictionary::seed(), &[], &TrainConfig::default());
        assert!(matches!(r, Err(Error::EmptyDataset)));
    }

    #[test]
    fn external_scorer_over_stdio() {
        let script = r#"while IFS= read -r line; do id=$(printf '%s' "$line" | sed 's/.*"pair_id":"\([0-9]*\)".*/\1/'); printf '{"pair_id":"%s","p":0.25}\n' "$id"; done"#;
        let s = ExternalScorer::new(ExternalTransport::Stdio {
            command: "sh".into(),
            args: vec!["-c".into(), script.into()],
        });
        let pairs = vec![
            encode_pair(&t("a", "", ""), &t("b", "", "")),
            encode_pair(&t("c", "", ""), &t("d", "", "")),
        ];
        assert_eq!(s.score_batch(&pairs).unwrap(), vec![0.25, 0.25]);
    }

    #[test]
    fn external_response_parsing() {
        let ok = ExternalScorer::parse_response(2, "{\"pair_id\":\"1\",\"p\":0.5}\n{\"pair_id\":\"0\",\"p\":1}\n").unwrap();
        assert_eq!(ok, vec![1.0, 0.5]);
        assert!(ExternalScorer::parse_response(2, "{\"pair_id\":\"0\",\"p\":0.5}\n").is_err());
        assert!(ExternalScorer::parse_response(1, "{\"pair_id\":\"0\",\"p\":1.5}\n").is_err());
    }
}
