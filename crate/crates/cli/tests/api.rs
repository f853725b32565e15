use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use labharm::ablation::build_retriever;
use labharm::lexical::Bm25Params;
use labharm::pairs::read_pairs;
use labharm::pipeline::{Engine, EngineConfig, HarmonizationResult};
use labharm::review::{export_feedback_pairs, read_feedback_log, ReviewStore};
use labharm::synonyms::SynonymDictionary;
use labharm::synth::{generate_benchmark, SynthConfig};
use labharm::{QueryRecord, TagStatus};
use labharm_cli::server::{router, QueuePage, Stats};

fn results() -> Vec<HarmonizationResult> {
    let b = generate_benchmark(&SynthConfig {
        records: 300,
        validation_queries: 10,
        test_queries: 60,
        seed: 3,
    });
    let r = build_retriever(b.records, SynonymDictionary::seed(), Bm25Params::default(), 64).unwrap();
    let engine = Engine::new(Arc::new(r), None, EngineConfig::default()).unwrap();
    let queries: Vec<QueryRecord> = b.test.iter().map(|q| QueryRecord::new(q.id.clone(), q.triad.clone())).collect();
    let out = engine.harmonize_batch(&queries);
    assert!(out.failures.is_empty());
    out.results
}

fn app(log: &Path) -> (Router, Vec<HarmonizationResult>) {
    let rs = results();
    let store = Arc::new(ReviewStore::open(rs.clone(), log).unwrap());
    (router(store), rs)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, v)
}

async fn raw_post(app: &Router, body: &'static str) -> StatusCode {
    let req = Request::post("/verdict")
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    app.clone().oneshot(req).await.unwrap().status()
}

async fn stats(app: &Router) -> Stats {
    let (s, v) = call(app, "GET", "/stats", None).await;
    assert_eq!(s, StatusCode::OK);
    serde_json::from_value(v).unwrap()
}

/// First pending result with at least three candidates.
fn pick(rs: &[HarmonizationResult], skip: usize) -> &HarmonizationResult {
    rs.iter()
        .filter(|r| r.tag == TagStatus::Pending && r.candidates.len() >= 3)
        .nth(skip)
        .expect("enough pending results")
}

#[tokio::test]
async fn health_and_queue() {
    let dir = tempfile::tempdir().unwrap();
    let (app, rs) = app(&dir.path().join("f.jsonl"));
    let (s, v) = call(&app, "GET", "/health", None).await;
    assert_eq!((s, v["status"].as_str()), (StatusCode::OK, Some("ok")));

    let (s, v) = call(&app, "GET", "/queue?limit=5", None).await;
    assert_eq!(s, StatusCode::OK);
    let page: QueuePage = serde_json::from_value(v).unwrap();
    let reviewable = rs.iter().filter(|r| matches!(r.tag, TagStatus::Pending | TagStatus::Reranked)).count();
    assert_eq!(page.total, reviewable);
    assert_eq!(page.items.len(), 5.min(reviewable));
    assert!(page.items.iter().all(|r| matches!(r.tag, TagStatus::Pending | TagStatus::Reranked)));

    let (s, v) = call(&app, "GET", "/queue?status=Pending|Copy&limit=1000", None).await;
    assert_eq!(s, StatusCode::OK);
    let page: QueuePage = serde_json::from_value(v).unwrap();
    let want = rs.iter().filter(|r| matches!(r.tag, TagStatus::Pending | TagStatus::Copy)).count();
    assert_eq!(page.total, want);

    assert_eq!(call(&app, "GET", "/queue?status=Bogus", None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "GET", "/queue?limit=0", None).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn result_lookup() {
    let dir = tempfile::tempdir().unwrap();
    let (app, rs) = app(&dir.path().join("f.jsonl"));
    let (s, v) = call(&app, "GET", &format!("/result/{}", rs[0].query_id), None).await;
    assert_eq!(s, StatusCode::OK);
    let got: HarmonizationResult = serde_json::from_value(v).unwrap();
    assert_eq!(got, rs[0]);
    let (s, v) = call(&app, "GET", "/result/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v["error"].as_str().unwrap().contains("nope"));
}

#[tokio::test]
async fn verdict_transitions_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (app, rs) = app(&dir.path().join("f.jsonl"));
    let a = pick(&rs, 0);
    let b = pick(&rs, 1);
    let before = stats(&app).await;
    assert_eq!(before.feedback_events, 0);

    // accept top candidate: Pending -> Verified
    let (s, v) = call(
        &app,
        "POST",
        "/verdict",
        Some(json!({"query_id": a.query_id, "candidate_id": null, "verdict": "accept", "reviewer": "r1"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["tag"], "Verified");
    assert_eq!(v["decided_by"], "human");
    assert_eq!(stats(&app).await.feedback_events, 1);

    // pick the third candidate: Pending -> Human
    let third = &b.candidates[2].id;
    let (s, v) = call(
        &app,
        "POST",
        "/verdict",
        Some(json!({"query_id": b.query_id, "candidate_id": third, "verdict": "accept", "reviewer": "r1"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["tag"], "Human");
    assert_eq!(v["chosen"].as_str(), Some(third.as_str()));
    assert_eq!(stats(&app).await.feedback_events, 2);

    // second decision without force
    let body = json!({"query_id": a.query_id, "candidate_id": b.candidates[1].id, "verdict": "accept", "reviewer": "r2"});
    let (s, v) = call(&app, "POST", "/verdict", Some(body)).await;
    assert_eq!(s, StatusCode::CONFLICT, "{v}");
    assert_eq!(stats(&app).await.feedback_events, 2);
    let body = json!({"query_id": a.query_id, "verdict": "reject", "reviewer": "r2", "force": true});
    let (s, v) = call(&app, "POST", "/verdict", Some(body)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["tag"], "Human");
    assert!(v["chosen"].is_null());

    let unknown = json!({"query_id": "zzz", "verdict": "accept", "reviewer": "r1"});
    assert_eq!(call(&app, "POST", "/verdict", Some(unknown)).await.0, StatusCode::NOT_FOUND);
    let c = pick(&rs, 2);
    let bad_cand = json!({"query_id": c.query_id, "candidate_id": "R999999", "verdict": "accept", "reviewer": "r1"});
    assert_eq!(call(&app, "POST", "/verdict", Some(bad_cand)).await.0, StatusCode::BAD_REQUEST);
    let blank = json!({"query_id": c.query_id, "verdict": "accept", "reviewer": ""});
    assert_eq!(call(&app, "POST", "/verdict", Some(blank)).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(raw_post(&app, "{not json").await, StatusCode::BAD_REQUEST);
    assert_eq!(raw_post(&app, r#"{"query_id":"x","verdict":"maybe","reviewer":"r"}"#).await, StatusCode::BAD_REQUEST);
    assert_eq!(raw_post(&app, r#"{"query_id":"x","verdict":"accept"}"#).await, StatusCode::BAD_REQUEST);

    let s = stats(&app).await;
    assert_eq!(s.feedback_events, 3);
    assert_eq!(s.verdicts["accept"], 2);
    assert_eq!(s.verdicts["reject"], 1);
    assert_eq!(s.tags["Verified"], 0);
    assert_eq!(s.tags["Human"], 2);
    assert_eq!(s.tags.values().sum::<usize>(), rs.len());
}

#[tokio::test]
async fn feedback_round_trip_and_restart() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("f.jsonl");
    let (app, rs) = app(&log);
    let a = pick(&rs, 0);
    let b = pick(&rs, 1);
    let c = pick(&rs, 2);
    for body in [
        json!({"query_id": a.query_id, "verdict": "accept", "reviewer": "r1"}),
        json!({"query_id": b.query_id, "candidate_id": b.candidates[1].id, "verdict": "accept", "reviewer": "r1"}),
        json!({"query_id": c.query_id, "candidate_id": c.candidates[0].id, "verdict": "reject", "reviewer": "r2"}),
    ] {
        assert_eq!(call(&app, "POST", "/verdict", Some(body)).await.0, StatusCode::OK);
    }

    let out = dir.path().join("pairs.jsonl");
    assert_eq!(export_feedback_pairs(&log, &out).unwrap(), 3);
    let pairs = read_pairs(&out).unwrap();
    let expect = [
        (&a.query, &a.candidates[0].triad, 1),
        (&b.query, &b.candidates[1].triad, 1),
        (&c.query, &c.candidates[0].triad, 0),
    ];
    for (p, (q, cand, label)) in pairs.iter().zip(expect) {
        assert_eq!((&p.left, &p.right, p.label), (q, cand, label));
    }

    let reopened = ReviewStore::open(rs.clone(), &log).unwrap();
    let snap = reopened.snapshot();
    assert_eq!(snap.get(&a.query_id).unwrap().tag, TagStatus::Verified);
    assert_eq!(snap.get(&b.query_id).unwrap().tag, TagStatus::Human);
    assert_eq!(snap.feedback_events, 3);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_verdicts_append_one_line_each() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("f.jsonl");
    let (app, rs) = app(&log);
    let targets: Vec<&HarmonizationResult> = rs.iter().filter(|r| !r.candidates.is_empty()).take(40).collect();
    let mut tasks = Vec::new();
    for (i, r) in targets.iter().enumerate() {
        let app = app.clone();
        let body = json!({"query_id": r.query_id, "verdict": "accept", "reviewer": format!("r{}", i % 3)});
        tasks.push(tokio::spawn(async move { call(&app, "POST", "/verdict", Some(body)).await.0 }));
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    let events = read_feedback_log(&log).unwrap();
    assert_eq!(events.len(), targets.len());
    let mut last: HashMap<String, u64> = HashMap::new();
    for e in &events {
        let prev = last.insert(e.reviewer.clone(), e.timestamp).unwrap_or(0);
        assert!(e.timestamp >= prev);
    }
    assert_eq!(stats(&app).await.feedback_events, targets.len());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn serves_over_a_real_socket() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(&dir.path().join("f.jsonl"));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    let text = tokio::task::spawn_blocking(move || {
        let mut s = std::net::TcpStream::connect(addr).unwrap();
        s.write_all(b"GET /stats HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
        let mut out = String::new();
        s.read_to_string(&mut out).unwrap();
        out
    })
    .await
    .unwrap();
    assert!(text.starts_with("HTTP/1.1 200"), "{text}");
    assert!(text.contains("\"feedback_events\":0"));
}
