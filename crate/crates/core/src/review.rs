//! Human review of harmonization results: verdicts, the append-only
//! feedback log, and export of verdicts as training pairs.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TagStatus, Triad};
use crate::pairs::{write_pairs, Difficulty, LabeledPair, PairClass};
use crate::pipeline::{now_ms, DecidedBy, HarmonizationResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

/// Body of a verdict submission. `candidate_id` null means the current
/// top candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRequest {
    pub query_id: String,
    #[serde(default)]
    pub candidate_id: Option<String>,
    pub verdict: Verdict,
    pub reviewer: String,
    #[serde(default)]
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub query_id: String,
    pub query: Triad,
    pub candidate_id: Option<String>,
    pub candidate: Option<Triad>,
    pub verdict: Verdict,
    pub reviewer: String,
    #[serde(default)]
    pub force: bool,
    pub timestamp: u64,
}

/// Why a verdict was refused; maps onto HTTP 400 / 404 / 409.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReviewError {
    BadRequest(String),
    NotFound(String),
    Conflict(String),
    Internal(String),
}

impl std::fmt::Display for ReviewError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReviewError::BadRequest(m) => write!(f, "bad request: {m}"),
            ReviewError::NotFound(m) => write!(f, "not found: {m}"),
            ReviewError::Conflict(m) => write!(f, "conflict: {m}"),
            ReviewError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for ReviewError {}

impl From<Error> for ReviewError {
    fn from(e: Error) -> Self {
        ReviewError::Internal(e.to_string())
    }
}

/// Applies a verdict to a result, returning the updated result and the
/// event to log. Pure: no I/O, the timestamp is given.
pub fn apply_verdict(
    current: &HarmonizationResult,
    req: &VerdictRequest,
    timestamp: u64,
) -> std::result::Result<(HarmonizationResult, FeedbackEvent), ReviewError> {
    if req.reviewer.trim().is_empty() {
        return Err(ReviewError::BadRequest("reviewer must not be empty".into()));
    }
    if current.tag.is_human() && !req.force {
        return Err(ReviewError::Conflict(format!(
            "query {} is already {}; resubmit with force to change it",
            current.query_id, current.tag
        )));
    }
    let top = current.candidates.first();
    let target = match &req.candidate_id {
        Some(id) => Some(current.candidate(id).ok_or_else(|| {
            ReviewError::BadRequest(format!("'{id}' is not a candidate of query {}", current.query_id))
        })?),
        None => top,
    };
    let mut next = current.clone();
    next.decided_by = DecidedBy::Human;
    next.decided_at = Some(timestamp);
    next.reviewer = Some(req.reviewer.clone());
    match req.verdict {
        Verdict::Accept => {
            let Some(t) = target else {
                return Err(ReviewError::BadRequest(format!(
                    "query {} has no candidates to accept",
                    current.query_id
                )));
            };
            next.tag = if top.is_some_and(|c| c.id == t.id) {
                TagStatus::Verified
            } else {
                TagStatus::Human
            };
            next.chosen = Some(t.id.clone());
        }
        Verdict::Reject => {
            next.tag = TagStatus::Human;
            next.chosen = None;
            if next.candidates.is_empty() {
                next.tag = TagStatus::Missing;
            }
        }
    }
    let event = FeedbackEvent {
        query_id: current.query_id.clone(),
        query: current.query.clone(),
        candidate_id: target.map(|c| c.id.clone()),
        candidate: target.map(|c| c.triad.clone()),
        verdict: req.verdict,
        reviewer: req.reviewer.clone(),
        force: req.force,
        timestamp,
    };
    Ok((next, event))
}

pub fn read_feedback_log(path: impl AsRef<Path>) -> Result<Vec<FeedbackEvent>> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
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

/// Converts logged verdicts to labeled pairs: accepts become positives,
/// rejections of a concrete candidate become N1 negatives. Repeated
/// (query, candidate, verdict) events are kept once.
pub fn feedback_pairs(events: &[FeedbackEvent]) -> Vec<LabeledPair> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for e in events {
        let Some(cand) = &e.candidate else { continue };
        if !seen.insert((e.query.clone(), cand.clone(), e.verdict)) {
            continue;
        }
        let (label, class) = match e.verdict {
            Verdict::Accept => (1, PairClass::Pos),
            Verdict::Reject => (0, PairClass::N1),
        };
        out.push(LabeledPair {
            left: e.query.clone(),
            right: cand.clone(),
            label,
            class,
            difficulty: Difficulty::Hard,
        });
    }
    out
}

/// Reads a feedback log and writes the pair file; returns the pair count.
pub fn export_feedback_pairs(log: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<usize> {
    let pairs = feedback_pairs(&read_feedback_log(log)?);
    write_pairs(out, &pairs)?;
    Ok(pairs.len())
}

/// Immutable view of the results; readers clone the `Arc` and never block
/// writers for longer than the pointer swap.
#[derive(Debug, Default)]
pub struct Snapshot {
    pub results: Vec<Arc<HarmonizationResult>>,
    pub index: HashMap<String, usize>,
    pub feedback_events: usize,
    pub verdicts: HashMap<Verdict, usize>,
}

impl Snapshot {
    pub fn get(&self, query_id: &str) -> Option<&Arc<HarmonizationResult>> {
        self.index.get(query_id).map(|&i| &self.results[i])
    }

    pub fn tag_counts(&self) -> HashMap<TagStatus, usize> {
        let mut m: HashMap<TagStatus, usize> = TagStatus::ALL.iter().map(|t| (*t, 0)).collect();
        for r in &self.results {
            *m.entry(r.tag).or_default() += 1;
        }
        m
    }

    /// Results whose tag is in `statuses`, in file order.
    pub fn queue(&self, statuses: &[TagStatus], offset: usize, limit: usize) -> Vec<Arc<HarmonizationResult>> {
        self.results
            .iter()
            .filter(|r| statuses.contains(&r.tag))
            .skip(offset)
            .take(limit)
            .cloned()
            .collect()
    }
}

struct Writer {
    log: Option<File>,
    last_ts: HashMap<String, u64>,
}

/// Review state backed by a results snapshot and an append-only log.
pub struct ReviewStore {
    snapshot: RwLock<Arc<Snapshot>>,
    writer: Mutex<Writer>,
    log_path: Option<PathBuf>,
}

impl ReviewStore {
    /// In-memory store (no log file).
    pub fn in_memory(results: Vec<HarmonizationResult>) -> Result<Self> {
        Self::build(results, None)
    }

    /// Loads results and replays the feedback log at `log_path` (created on
    /// first verdict if absent).
    pub fn open(results: Vec<HarmonizationResult>, log_path: impl Into<PathBuf>) -> Result<Self> {
        Self::build(results, Some(log_path.into()))
    }

    fn build(results: Vec<HarmonizationResult>, log_path: Option<PathBuf>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, r) in results.iter().enumerate() {
            if index.insert(r.query_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.query_id.clone()));
            }
        }
        let mut snap = Snapshot {
            results: results.into_iter().map(Arc::new).collect(),
            index,
            feedback_events: 0,
            verdicts: HashMap::new(),
        };
        let mut last_ts: HashMap<String, u64> = HashMap::new();
        if let Some(p) = &log_path {
            for ev in read_feedback_log(p)? {
                let Some(&i) = snap.index.get(&ev.query_id) else {
                    log::warn!("feedback for unknown query {} ignored", ev.query_id);
                    continue;
                };
                let req = VerdictRequest {
                    query_id: ev.query_id.clone(),
                    candidate_id: ev.candidate_id.clone(),
                    verdict: ev.verdict,
                    reviewer: ev.reviewer.clone(),
                    force: ev.force,
                };
                match apply_verdict(&snap.results[i], &req, ev.timestamp) {
                    Ok((next, _)) => snap.results[i] = Arc::new(next),
                    Err(e) => log::warn!("replaying verdict for {}: {e}", ev.query_id),
                }
                snap.feedback_events += 1;
                *snap.verdicts.entry(ev.verdict).or_default() += 1;
                let t = last_ts.entry(ev.reviewer.clone()).or_default();
                *t = (*t).max(ev.timestamp);
            }
        }
        Ok(ReviewStore {
            snapshot: RwLock::new(Arc::new(snap)),
            writer: Mutex::new(Writer { log: None, last_ts }),
            log_path,
        })
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock poisoned").clone()
    }

    /// Validates and applies a verdict, appending its event to the log
    /// before publishing the new snapshot.
    pub fn submit(&self, req: &VerdictRequest) -> std::result::Result<Arc<HarmonizationResult>, ReviewError> {
        let mut w = self.writer.lock().map_err(|_| ReviewError::Internal("writer lock poisoned".into()))?;
        let snap = self.snapshot();
        let &i = snap
            .index
            .get(&req.query_id)
            .ok_or_else(|| ReviewError::NotFound(format!("unknown query id '{}'", req.query_id)))?;
        // timestamps never go backwards for a reviewer
        let prev = w.last_ts.get(&req.reviewer).copied().unwrap_or(0);
        let ts = now_ms().max(prev);
        let (next, event) = apply_verdict(&snap.results[i], req, ts)?;
        if let Some(path) = &self.log_path {
            if w.log.is_none() {
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| ReviewError::Internal(format!("{}: {e}", path.display())))?;
                w.log = Some(f);
            }
            let mut line = serde_json::to_vec(&event).map_err(|e| ReviewError::Internal(e.to_string()))?;
            line.push(b'\n');
            let f = w.log.as_mut().expect("opened above");
            f.write_all(&line)
                .and_then(|_| f.flush())
                .map_err(|e| ReviewError::Internal(format!("{}: {e}", path.display())))?;
        }
        w.last_ts.insert(req.reviewer.clone(), ts);
        let next = Arc::new(next);
        let mut results = snap.results.clone();
        results[i] = next.clone();
        let mut verdicts = snap.verdicts.clone();
        *verdicts.entry(req.verdict).or_default() += 1;
        let new_snap = Snapshot {
            results,
            index: snap.index.clone(),
            feedback_events: snap.feedback_events + 1,
            verdicts,
        };
        *self.snapshot.write().expect("snapshot lock poisoned") = Arc::new(new_snap);
        Ok(next)
    }
}
