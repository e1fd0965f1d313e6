use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use spanlight_core::annotator::{
    annotate_dataset, build_prompt, AnnotateOptions, AnnotationPair, HttpLlmClient, LlmClient, LlmClientConfig,
};

#[derive(Clone, Default)]
struct Seen {
    bodies: Arc<Mutex<Vec<Value>>>,
    auth: Arc<Mutex<Vec<Option<String>>>>,
}

async fn complete(State(seen): State<Seen>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let auth = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    seen.auth.lock().unwrap().push(auth);
    let prompt = body["messages"][0]["content"].as_str().unwrap_or_default().to_string();
    seen.bodies.lock().unwrap().push(body);
    if prompt.contains("FAIL") {
        return (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({"error": "boom"})));
    }
    let reply = json!({"choices": [{"message": {"role": "assistant", "content": "Sure:\n[\"cat sat\"]"}}]});
    (StatusCode::OK, Json(reply))
}

fn spawn_stub() -> (SocketAddr, Seen) {
    let seen = Seen::default();
    let app = Router::new()
        .route("/v1/chat/completions", post(complete))
        .with_state(seen.clone());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    (rx.recv().unwrap(), seen)
}

fn config(addr: SocketAddr, key_env: Option<&str>) -> LlmClientConfig {
    LlmClientConfig {
        base_url: format!("http://{addr}/v1/"),
        model: "stub-model".into(),
        api_key_env: key_env.map(str::to_string),
        timeout_secs: 5.0,
        max_retries: 1,
        temperature: 0.0,
    }
}

#[test]
fn request_shape_and_response() {
    let (addr, seen) = spawn_stub();
    std::env::set_var("SPANLIGHT_STUB_KEY", "sk-test");
    let client = HttpLlmClient::new(config(addr, Some("SPANLIGHT_STUB_KEY"))).unwrap();
    let prompt = build_prompt("who sat", "the cat sat").unwrap();
    assert_eq!(client.complete(&prompt).unwrap(), "Sure:\n[\"cat sat\"]");

    let body = seen.bodies.lock().unwrap()[0].clone();
    assert_eq!(
        body,
        json!({"model": "stub-model", "temperature": 0, "messages": [{"role": "user", "content": prompt}]})
    );
    assert!(body["temperature"].is_u64());
    assert_eq!(seen.auth.lock().unwrap()[0].as_deref(), Some("Bearer sk-test"));
}

#[test]
fn missing_key_variable_is_rejected() {
    let cfg = config("127.0.0.1:9".parse().unwrap(), Some("SPANLIGHT_UNSET_KEY_VAR"));
    assert!(HttpLlmClient::new(cfg).is_err());
}

#[test]
fn server_errors_exhaust_retries_and_run_continues() {
    let (addr, seen) = spawn_stub();
    let client = HttpLlmClient::new(config(addr, None)).unwrap();
    let pairs = vec![
        AnnotationPair {
            qid: "q1".into(),
            query: "FAIL".into(),
            pid: "p1".into(),
            text: "the cat sat".into(),
        },
        AnnotationPair {
            qid: "q2".into(),
            query: "who sat".into(),
            pid: "p2".into(),
            text: "the cat sat".into(),
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.jsonl");
    let opts = AnnotateOptions {
        max_retries: 2,
        backoff: Duration::from_millis(1),
        concurrency: 2,
    };
    let summary = annotate_dataset(&client, &pairs, &out, &opts).unwrap();
    assert_eq!(summary.annotated, 1);
    assert_eq!(summary.failures.len(), 1);
    assert_eq!(summary.retries, 2);
    assert!(seen.auth.lock().unwrap().iter().all(Option::is_none));
    let written = std::fs::read_to_string(&out).unwrap();
    assert_eq!(written.lines().count(), 1);
    assert!(written.contains("\"targets\":[0,1,1]"));
}
