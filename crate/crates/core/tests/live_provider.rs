//! The live client against a local stub server speaking just enough HTTP/1.1.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use evoloop::provider::{ChatProvider, ChatRequest, LiveConfig, LiveProvider, ProviderError, RetryPolicy};

struct Canned {
    status: u16,
    headers: Vec<(&'static str, &'static str)>,
    body: String,
}

fn ok(content: &str) -> Canned {
    Canned {
        status: 200,
        headers: vec![],
        body: serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": content}}],
            "usage": {"prompt_tokens": 11, "completion_tokens": 7}
        })
        .to_string(),
    }
}

fn status(code: u16, body: &str) -> Canned {
    Canned {
        status: code,
        headers: vec![],
        body: body.to_string(),
    }
}

struct Stub {
    base: String,
    /// Parsed JSON bodies and Authorization headers of received requests.
    received: Arc<Mutex<Vec<(serde_json::Value, String)>>>,
}

/// Serves the canned responses in order, one per connection, then stops.
fn serve(responses: Vec<Canned>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    let received = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&received);
    thread::spawn(move || {
        for canned in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut headers = BTreeMap::new();
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            assert!(line.starts_with("POST /v1/chat/completions "), "{line}");
            loop {
                line.clear();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                let (k, v) = line.split_once(':').unwrap();
                headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
            }
            let len: usize = headers.get("content-length").map_or(0, |v| v.parse().unwrap());
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push((
                serde_json::from_slice(&body).unwrap(),
                headers.get("authorization").cloned().unwrap_or_default(),
            ));
            let mut out = format!(
                "HTTP/1.1 {} Stub\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n",
                canned.status,
                canned.body.len()
            );
            for (k, v) in &canned.headers {
                out.push_str(&format!("{k}: {v}\r\n"));
            }
            out.push_str("\r\n");
            out.push_str(&canned.body);
            let mut stream = reader.into_inner();
            stream.write_all(out.as_bytes()).unwrap();
        }
    });
    Stub { base, received }
}

fn provider(base: &str) -> LiveProvider {
    LiveProvider::new(LiveConfig {
        api_base: base.to_string(),
        api_key: "sk-test".into(),
        request_timeout: Duration::from_secs(5),
        retry: RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(10),
            max_delay: Duration::from_millis(40),
            max_rate_limit_wait: Duration::from_millis(50),
        },
    })
    .unwrap()
}

fn request() -> ChatRequest {
    ChatRequest {
        system_text: "You are a programmer.".into(),
        user_text: "Write hello world.".into(),
        model_name: "stub-model".into(),
        temperature: 0.2,
        max_output_tokens: 64,
        template_id: None,
        bindings: BTreeMap::new(),
    }
}

#[test]
fn success_returns_content_and_usage() {
    let stub = serve(vec![ok("print('hi')")]);
    let resp = provider(&stub.base).complete(&request()).unwrap();
    assert_eq!(resp.text, "print('hi')");
    assert_eq!(resp.token_usage.prompt, 11);
    assert_eq!(resp.token_usage.completion, 7);

    let received = stub.received.lock().unwrap();
    let (body, auth) = &received[0];
    assert_eq!(auth, "Bearer sk-test");
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["max_tokens"], 64);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "Write hello world.");
}

#[test]
fn rate_limit_is_retried() {
    let mut limited = status(429, "{\"error\":\"slow down\"}");
    limited.headers.push(("retry-after", "0.01"));
    let stub = serve(vec![limited, ok("done")]);
    let resp = provider(&stub.base).complete(&request()).unwrap();
    assert_eq!(resp.text, "done");
    assert_eq!(stub.received.lock().unwrap().len(), 2);
}

#[test]
fn auth_failure_is_not_retried() {
    let stub = serve(vec![status(401, "{\"error\":\"bad key\"}"), ok("unreachable")]);
    let err = provider(&stub.base).complete(&request()).unwrap_err();
    assert!(
        matches!(err, ProviderError::Auth(ref m) if m.contains("bad key")),
        "{err:?}"
    );
    assert_eq!(stub.received.lock().unwrap().len(), 1);
}

#[test]
fn server_errors_exhaust_attempts() {
    let stub = serve(vec![
        status(500, "boom"),
        status(502, "boom"),
        status(503, "boom"),
        ok("too late"),
    ]);
    let err = provider(&stub.base).complete(&request()).unwrap_err();
    assert!(
        matches!(err, ProviderError::Transport(ref m) if m.contains("503")),
        "{err:?}"
    );
    assert_eq!(stub.received.lock().unwrap().len(), 3);
}

#[test]
fn malformed_body_is_invalid_response() {
    let stub = serve(vec![
        status(200, "{\"choices\": []}"),
        status(200, "{\"choices\": []}"),
        status(200, "{\"choices\": []}"),
    ]);
    let err = provider(&stub.base).complete(&request()).unwrap_err();
    assert!(matches!(err, ProviderError::InvalidResponse(_)), "{err:?}");
}

#[test]
fn invalid_request_is_rejected_locally() {
    let mut req = request();
    req.temperature = 5.0;
    // Nothing listens here; validation must fail before any connection.
    let err = provider("http://127.0.0.1:9").complete(&req).unwrap_err();
    assert!(matches!(err, ProviderError::InvalidRequest(_)));
}

#[test]
fn unreachable_endpoint_is_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let err = provider(&format!("http://{addr}")).complete(&request()).unwrap_err();
    assert!(matches!(err, ProviderError::Transport(_)), "{err:?}");
}
