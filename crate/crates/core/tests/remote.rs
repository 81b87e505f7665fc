use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use rlqg::backends::{chat_request, request_hash, BackendConfig, RemoteBackend, RemoteEmbedder};
use rlqg::prompting::FewShotBank;
use rlqg::textmetrics::{EmbedError, Embedder};
use serde_json::{json, Value};

/// Serves queued `(status, body)` replies in order and keeps every request
/// body it saw. Once the queue is empty it answers 500.
struct FakeServer {
    url: String,
    seen: Arc<Mutex<Vec<Value>>>,
}

fn serve(replies: Vec<(u16, Value)>) -> FakeServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let queue = Arc::new(Mutex::new(VecDeque::from(replies)));
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
            let mut body = vec![0; len];
            let _ = reader.read_exact(&mut body);
            log.lock()
                .unwrap()
                .push(serde_json::from_slice(&body).unwrap_or(Value::Null));
            let (status, reply) = queue
                .lock()
                .unwrap()
                .pop_front()
                .unwrap_or((500, json!({})));
            let text = reply.to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
        }
    });
    FakeServer { url, seen }
}

fn chat(text: &str) -> Value {
    json!({"choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]})
}

fn embedding(v: &[f64]) -> Value {
    json!({"data": [{"embedding": v}]})
}

fn config(url: &str) -> BackendConfig {
    BackendConfig {
        backoff_ms: 1,
        retry_budget: 3,
        timeout_secs: 5.0,
        ..BackendConfig::remote(url, "test-model")
    }
}

#[test]
fn transient_failures_are_retried() {
    let server = serve(vec![
        (429, json!({})),
        (503, json!({})),
        (200, chat("Who attacked?")),
    ]);
    let backend = RemoteBackend::new(&config(&server.url)).unwrap();
    let out = backend.generate(&FewShotBank::qg().transcript("q"));
    assert_eq!(out.text, "Who attacked?");
    assert_eq!(out.attempts, 3);
    assert!(!out.is_error());
    assert_eq!(server.seen.lock().unwrap().len(), 3);
}

#[test]
fn retry_budget_is_respected() {
    let server = serve(vec![(500, json!({})); 5]);
    let cfg = BackendConfig {
        retry_budget: 1,
        ..config(&server.url)
    };
    let out = RemoteBackend::new(&cfg)
        .unwrap()
        .generate(&FewShotBank::qg().transcript("q"));
    assert!(out.is_error());
    assert_eq!(out.attempts, 2);
    assert!(out.diagnostic.unwrap().contains("retries exhausted"));
}

#[test]
fn client_errors_are_not_retried() {
    let server = serve(vec![(400, json!({"error": "bad"})), (200, chat("late"))]);
    let out = RemoteBackend::new(&config(&server.url))
        .unwrap()
        .generate(&FewShotBank::qg().transcript("q"));
    assert!(out.is_error());
    assert_eq!(out.attempts, 1);
    assert_eq!(server.seen.lock().unwrap().len(), 1);
}

#[test]
fn cassette_records_then_replays_offline() {
    let dir = tempfile::tempdir().unwrap();
    let tape = dir.path().join("tape.jsonl");
    let server = serve(vec![(200, chat("Where was it?"))]);
    let transcript = FewShotBank::qg().transcript("role: place");
    let cfg = BackendConfig {
        cassette: Some(tape.clone()),
        ..config(&server.url)
    };
    let live = RemoteBackend::new(&cfg).unwrap().generate(&transcript);
    assert_eq!(live.text, "Where was it?");

    let sent = server.seen.lock().unwrap()[0].clone();
    assert_eq!(sent, chat_request(&cfg, &transcript));
    let line: Value = serde_json::from_str(
        std::fs::read_to_string(&tape)
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    assert_eq!(line["request_hash"], json!(request_hash(&sent)));

    let offline = BackendConfig {
        offline: true,
        ..cfg.clone()
    };
    let replay = RemoteBackend::new(&offline).unwrap().generate(&transcript);
    assert_eq!(replay.text, live.text);
    assert_eq!(replay.attempts, 0);
    assert_eq!(server.seen.lock().unwrap().len(), 1);

    let miss = RemoteBackend::new(&offline)
        .unwrap()
        .generate(&FewShotBank::qg().transcript("other"));
    assert!(miss.is_error());
    assert!(miss.diagnostic.unwrap().contains("offline"));
}

#[test]
fn offline_without_cassette_never_connects() {
    let server = serve(vec![(200, chat("x"))]);
    let cfg = BackendConfig {
        offline: true,
        ..config(&server.url)
    };
    let backend = RemoteBackend::new(&cfg).unwrap();
    assert!(backend
        .generate(&FewShotBank::qa().transcript("q"))
        .is_error());
    assert!(backend.embed("text").is_err());
    std::thread::sleep(std::time::Duration::from_millis(50));
    assert!(server.seen.lock().unwrap().is_empty());
}

#[test]
fn generate_n_sends_n_and_drops_empty_choices() {
    let reply = json!({"choices": [
        {"message": {"content": " Who fired? "}},
        {"message": {"content": ""}},
        {"message": {"content": "Who shot?"}}
    ]});
    let server = serve(vec![(200, reply)]);
    let backend = RemoteBackend::new(&config(&server.url)).unwrap();
    let out = backend
        .generate_n(&FewShotBank::qg().transcript("q"), 3)
        .unwrap();
    assert_eq!(out, vec!["Who fired?".to_string(), "Who shot?".to_string()]);
    assert_eq!(server.seen.lock().unwrap()[0]["n"], json!(3));
}

#[test]
fn embedder_pins_dimension_and_detects_drift() {
    let server = serve(vec![
        (200, embedding(&[1.0, 0.0, 0.0])),
        (200, embedding(&[0.5, 0.5, 0.0])),
        (200, embedding(&[1.0, 2.0])),
    ]);
    let emb = RemoteEmbedder::connect(&config(&server.url)).unwrap();
    assert_eq!(emb.dim(), 3);
    assert_eq!(emb.embed("a").unwrap(), vec![0.5, 0.5, 0.0]);
    assert!(matches!(
        emb.embed("b"),
        Err(EmbedError::DimensionDrift {
            expected: 3,
            actual: 2
        })
    ));
    assert!(matches!(emb.embed("  "), Err(EmbedError::EmptyText)));
}

#[test]
fn declared_dimension_is_checked_at_startup() {
    let server = serve(vec![(200, embedding(&[1.0, 0.0]))]);
    let cfg = BackendConfig {
        embedding_dim: Some(4),
        ..config(&server.url)
    };
    assert!(matches!(
        RemoteEmbedder::connect(&cfg),
        Err(EmbedError::DimensionDrift {
            expected: 4,
            actual: 2
        })
    ));
}

#[test]
fn request_hash_is_stable_and_sensitive() {
    let cfg = config("http://localhost:1/v1");
    let t = FewShotBank::qa().transcript("Question: who?");
    let a = request_hash(&chat_request(&cfg, &t));
    assert_eq!(a, request_hash(&chat_request(&cfg, &t)));
    assert_eq!(a.len(), 64);
    let hotter = BackendConfig {
        temperature: 0.9,
        ..cfg
    };
    assert_ne!(a, request_hash(&chat_request(&hotter, &t)));
}
