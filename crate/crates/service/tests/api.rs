use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use dialplan_core::corpus::{Phrase, SemanticAnnotation};
use dialplan_core::decode::{DecodingPolicy, Stage};
use dialplan_core::labels::{DialogueAct, Emotion, Speaker};
use dialplan_core::linearize::{LinearizationScheme, Tokenizer, TokenId, TokenType};
use dialplan_core::stub::{self, FnModel};
use dialplan_service::{cors, router, ChatService, Engine};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

type Stub = FnModel<Box<dyn Fn(&[TokenId], &[TokenType]) -> Vec<f64> + Send + Sync>>;

fn service() -> Arc<ChatService<Stub>> {
    let tk = Tokenizer::build(["i like jazz and rock music a lot . do you play guitar or piano ? yes no maybe"]);
    let hashed = stub::hashed(tk.vocab_size(), 320, 11, 0.3);
    let f = hashed.f;
    let model: Stub = FnModel { vocab: hashed.vocab, max_positions: hashed.max_positions, f: Box::new(f) };
    let engine = Engine::new(model, tk, LinearizationScheme::default(), DecodingPolicy::default()).unwrap();
    Arc::new(ChatService::new(engine))
}

fn app() -> Router {
    router(service(), cors(None).unwrap())
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

async fn create(app: &Router, body: Option<Value>) -> String {
    let (status, v) = call(app, Method::POST, "/sessions", body).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

fn error_code(v: &Value) -> &str {
    v["error"]["code"].as_str().unwrap()
}

#[tokio::test]
async fn default_policy_echo() {
    let (status, v) = call(&app(), Method::GET, "/policy", None).await;
    assert_eq!(status, StatusCode::OK);
    let r = &v["response"];
    assert_eq!(r["top_k"], 50);
    assert_eq!(r["top_p"], 0.9);
    assert_eq!(r["temperature"], 0.7);
    assert_eq!((r["response"]["min"].as_u64(), r["response"]["max"].as_u64()), (Some(9), Some(32)));
    assert_eq!(v["planning"]["topical"]["min"], 5);
}

#[tokio::test]
async fn creates_distinct_empty_sessions() {
    let app = app();
    let a = create(&app, None).await;
    let b = create(&app, Some(json!({"seed": 3, "context": "music"}))).await;
    assert_ne!(a, b);
    let (status, v) = call(&app, Method::GET, &format!("/sessions/{b}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["history"], json!([]));
    assert_eq!(v["traces"], json!([]));
    assert_eq!(v["seed"], 3);
    assert_eq!(v["policy"]["response"]["temperature"], 0.7);
    let (_, ids) = call(&app, Method::GET, "/sessions", None).await;
    assert_eq!(ids.as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn malformed_bodies_are_rejected() {
    let app = app();
    let req = Request::builder().method(Method::POST).uri("/sessions").body(Body::from("{policy:")).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap();
    assert_eq!(error_code(&v), "invalid_request");

    let (status, v) = call(&app, Method::POST, "/sessions", Some(json!({"policy": {"response": {"top_p": "high"}}}))).await;
    assert_eq!((status, error_code(&v)), (StatusCode::BAD_REQUEST, "invalid_request"));

    let mut policy = DecodingPolicy::default();
    policy.response.top_p = 1.5;
    let (status, v) = call(&app, Method::POST, "/sessions", Some(json!({ "policy": policy }))).await;
    assert_eq!((status, error_code(&v)), (StatusCode::BAD_REQUEST, "invalid_policy"));

    let (status, v) = call(&app, Method::POST, "/sessions", Some(json!({"sede": 1}))).await;
    assert_eq!((status, error_code(&v)), (StatusCode::BAD_REQUEST, "invalid_request"));
}

#[tokio::test]
async fn unknown_session_and_route() {
    let app = app();
    let (status, v) = call(&app, Method::GET, "/sessions/nope", None).await;
    assert_eq!((status, error_code(&v)), (StatusCode::NOT_FOUND, "not_found"));
    let (status, v) = call(&app, Method::POST, "/sessions/nope/message", Some(json!({"text": "hi"}))).await;
    assert_eq!((status, error_code(&v)), (StatusCode::NOT_FOUND, "not_found"));
    let (status, _) = call(&app, Method::GET, "/nothing/here", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn turn_order_is_enforced() {
    let app = app();
    let id = create(&app, None).await;
    let (status, v) = call(&app, Method::POST, &format!("/sessions/{id}/generate"), None).await;
    assert_eq!((status, error_code(&v)), (StatusCode::CONFLICT, "no_pending_message"));
    let (status, v) = call(&app, Method::POST, &format!("/sessions/{id}/message"), Some(json!({"text": "   "}))).await;
    assert_eq!((status, error_code(&v)), (StatusCode::BAD_REQUEST, "empty_text"));

    let (status, _) = call(&app, Method::POST, &format!("/sessions/{id}/message"), Some(json!({"text": "i like jazz"}))).await;
    assert_eq!(status, StatusCode::OK);
    let (status, v) = call(&app, Method::POST, &format!("/sessions/{id}/message"), Some(json!({"text": "hello?"}))).await;
    assert_eq!((status, error_code(&v)), (StatusCode::CONFLICT, "out_of_turn"));
    let (status, v) = call(&app, Method::POST, &format!("/sessions/{id}/generate"), Some(json!({"regenerate": true}))).await;
    assert_eq!((status, error_code(&v)), (StatusCode::CONFLICT, "nothing_to_regenerate"));

    // the rejected message changed nothing
    let (_, v) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(v["history"].as_array().unwrap().len(), 1);
    assert!(v["pending"].is_object());
}

#[tokio::test]
async fn message_returns_understanding_and_plan_without_response() {
    let app = app();
    let id = create(&app, None).await;
    let (status, v) = call(&app, Method::POST, &format!("/sessions/{id}/message"), Some(json!({"text": "do you play guitar ?"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert!(v["understood"].is_object());
    let plan: SemanticAnnotation = serde_json::from_value(v["proposed_plan"].clone()).unwrap();
    assert!(!plan.topical_words.is_empty());
    let stages: Vec<&str> = v["stages"].as_array().unwrap().iter().map(|s| s["stage"].as_str().unwrap()).collect();
    assert_eq!(stages, ["understanding", "planning"]);

    let (_, s) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(s["history"][0]["speaker"], "human");
    assert_eq!(s["history"][0]["annotation"], v["understood"]);
    assert_eq!(s["traces"], json!([]));
}

#[tokio::test]
async fn one_exchange_records_history_and_trace() {
    let app = app();
    let id = create(&app, None).await;
    call(&app, Method::POST, &format!("/sessions/{id}/message"), Some(json!({"text": "i like jazz ."}))).await;
    let (status, trace) = call(&app, Method::POST, &format!("/sessions/{id}/generate"), None).await;
    assert_eq!(status, StatusCode::OK, "{trace}");
    assert_eq!(trace["plan_overridden"], false);
    let n = trace["response_tokens"].as_u64().unwrap();
    assert!((9..=32).contains(&n));

    let (_, s) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    let history = s["history"].as_array().unwrap();
    assert_eq!(history.len(), 2);
    assert_eq!(s["traces"].as_array().unwrap().len(), 1);
    assert_eq!(history[1]["speaker"], "machine");
    assert_eq!(history[1]["text"], trace["response"]);
    assert_eq!(history[1]["annotation"], trace["planned"]);
    assert!(s["pending"].is_null());
    let spans: Vec<&str> = s["traces"][0]["stages"].as_array().unwrap().iter().map(|x| x["tokens"].as_str().unwrap()).collect();
    assert!(spans[0].starts_with("<emotion>"));
    assert!(spans[1].contains("<topical>"));
    assert!(spans[2].starts_with("<machine>") && spans[2].ends_with("[SEP]"));
}

#[tokio::test]
async fn override_is_marked_and_reproducible() {
    let app = app();
    let plan = SemanticAnnotation {
        emotions: vec![Emotion::Happiness],
        dialogue_acts: vec![DialogueAct::Question],
        topical_words: vec![Phrase::from_text("piano")],
    };
    let mut responses = Vec::new();
    for _ in 0..2 {
        let id = create(&app, None).await;
        call(&app, Method::POST, &format!("/sessions/{id}/message"), Some(json!({"text": "i like jazz ."}))).await;
        let body = json!({"plan_override": plan, "seed": 42});
        let (status, t) = call(&app, Method::POST, &format!("/sessions/{id}/generate"), Some(body.clone())).await;
        assert_eq!(status, StatusCode::OK, "{t}");
        assert_eq!(t["plan_overridden"], true);
        assert_eq!(t["seed"], 42);
        let planned: SemanticAnnotation = serde_json::from_value(t["planned"].clone()).unwrap();
        assert_eq!(planned, plan);
        let planning = t["stages"].as_array().unwrap().iter().find(|s| s["stage"] == "planning").unwrap();
        assert_eq!(planning["inserted"], true);
        assert!(planning["tokens"].as_str().unwrap().contains("piano"));
        responses.push(t["response"].clone());

        // regenerating with the same seed and plan reproduces the turn
        let regen = json!({"plan_override": plan, "seed": 42, "regenerate": true});
        let (_, again) = call(&app, Method::POST, &format!("/sessions/{id}/generate"), Some(regen)).await;
        assert_eq!(again["response"], t["response"]);
        let (_, s) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
        assert_eq!(s["history"].as_array().unwrap().len(), 2);
        assert_eq!(s["traces"].as_array().unwrap().len(), 1);
    }
    assert_eq!(responses[0], responses[1]);
}

#[tokio::test]
async fn regenerate_with_new_seed_replaces_last_turn() {
    let app = app();
    let id = create(&app, None).await;
    call(&app, Method::POST, &format!("/sessions/{id}/message"), Some(json!({"text": "rock or jazz ?"}))).await;
    let (_, first) = call(&app, Method::POST, &format!("/sessions/{id}/generate"), Some(json!({"seed": 1}))).await;
    let mut seen = vec![first["response"].clone()];
    for seed in 2..6 {
        let (status, t) = call(&app, Method::POST, &format!("/sessions/{id}/generate"), Some(json!({"seed": seed, "regenerate": true}))).await;
        assert_eq!(status, StatusCode::OK);
        let (_, s) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
        assert_eq!(s["history"][1]["text"], t["response"]);
        assert_eq!(s["traces"].as_array().unwrap().len(), 1);
        seen.push(t["response"].clone());
    }
    seen.dedup();
    assert!(seen.len() > 1, "different seeds should give different samples");
}

#[tokio::test]
async fn one_shot_turn_matches_two_steps() {
    let app = app();
    let a = create(&app, Some(json!({"seed": 9}))).await;
    let b = create(&app, Some(json!({"seed": 9}))).await;
    let (status, one) = call(&app, Method::POST, &format!("/sessions/{a}/turn"), Some(json!({"text": "do you play piano ?"}))).await;
    assert_eq!(status, StatusCode::OK, "{one}");
    call(&app, Method::POST, &format!("/sessions/{b}/message"), Some(json!({"text": "do you play piano ?"}))).await;
    let (_, two) = call(&app, Method::POST, &format!("/sessions/{b}/generate"), None).await;
    assert_eq!(one, two);
}

#[tokio::test]
async fn planning_disabled_session_rejects_override() {
    let app = app();
    let policy = DecodingPolicy { use_planning: false, ..DecodingPolicy::default() };
    let id = create(&app, Some(json!({ "policy": policy }))).await;
    let (_, v) = call(&app, Method::POST, &format!("/sessions/{id}/message"), Some(json!({"text": "i like rock"}))).await;
    assert!(v["proposed_plan"].is_null());
    let body = json!({"plan_override": SemanticAnnotation::default()});
    let (status, e) = call(&app, Method::POST, &format!("/sessions/{id}/generate"), Some(body)).await;
    assert_eq!((status, error_code(&e)), (StatusCode::BAD_REQUEST, "planning_disabled"));
    // the message is still pending
    let (status, t) = call(&app, Method::POST, &format!("/sessions/{id}/generate"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(t["planned"].is_null());
}

#[tokio::test]
async fn delete_removes_session() {
    let app = app();
    let id = create(&app, None).await;
    let (status, _) = call(&app, Method::DELETE, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn cors_headers_are_sent() {
    let app = router(service(), cors(Some("http://localhost:5173")).unwrap());
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/sessions")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "http://localhost:5173");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_match_sequential_runs() {
    let texts = ["i like jazz", "do you play guitar ?", "rock music a lot", "yes maybe piano"];
    let run = |app: Router, seed: u64| async move {
        let id = create(&app, Some(json!({ "seed": seed }))).await;
        let mut out = Vec::new();
        for t in texts {
            let (status, v) = call(&app, Method::POST, &format!("/sessions/{id}/turn"), Some(json!({ "text": t }))).await;
            assert_eq!(status, StatusCode::OK);
            out.push(v["response"].as_str().unwrap().to_string());
        }
        out
    };
    let app = app();
    let mut sequential = Vec::new();
    for seed in 0..4 {
        sequential.push(run(app.clone(), seed).await);
    }
    let handles: Vec<_> = (0..4).map(|seed| tokio::spawn(run(app.clone(), seed))).collect();
    for (seed, h) in handles.into_iter().enumerate() {
        assert_eq!(h.await.unwrap(), sequential[seed]);
    }
}

#[test]
fn snapshot_round_trip_replans_pending_message() {
    let svc = service();
    let a = svc.create_session(Default::default()).unwrap().session_id;
    svc.turn(&a, &dialplan_service::TurnRequest { text: "i like jazz".into(), ..Default::default() }).unwrap();
    svc.post_message(&a, "and piano ?").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sessions.json");
    svc.save_snapshot(&path).unwrap();

    let restored = service();
    restored.load_snapshot(&path).unwrap();
    assert_eq!(restored.get_session(&a).unwrap(), svc.get_session(&a).unwrap());
    let t1 = svc.generate(&a, &Default::default()).unwrap();
    let t2 = restored.generate(&a, &Default::default()).unwrap();
    assert_eq!(t1, t2);
    let fresh = restored.create_session(Default::default()).unwrap().session_id;
    assert_ne!(fresh, a);
    assert_eq!(restored.get_session(&a).unwrap().history.iter().filter(|h| h.speaker == Speaker::Machine).count(), 2);
}

#[test]
fn response_stage_is_last() {
    let svc = service();
    let id = svc.create_session(Default::default()).unwrap().session_id;
    let t = svc.turn(&id, &dialplan_service::TurnRequest { text: "hi there".into(), ..Default::default() }).unwrap();
    assert_eq!(t.stages.last().unwrap().stage, Stage::Response);
}
