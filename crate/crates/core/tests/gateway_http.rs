//! HTTP backend behavior against a local counting server: success parsing,
//! retry-until-exhausted, permanent client errors, and key handling.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use repoflex_core::gateway::{
    BackendConfig, BackendKind, GatewayError, GenRequest, HttpChatBackend,
};

struct FakeServer {
    addr: SocketAddr,
    hits: Arc<AtomicUsize>,
    handle: Option<JoinHandle<Vec<String>>>,
}

impl FakeServer {
    /// Serves the given (status, body) responses in order, one per connection,
    /// then exits. Returns the request bodies it saw.
    fn start(responses: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind local port");
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let hits_clone = Arc::clone(&hits);
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().expect("accept");
                hits_clone.fetch_add(1, Ordering::SeqCst);
                seen.push(read_http_request(&mut stream));
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).expect("write reply");
            }
            seen
        });
        FakeServer {
            addr,
            hits,
            handle: Some(handle),
        }
    }

    fn url(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }

    fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    fn finish(mut self) -> Vec<String> {
        self.handle.take().unwrap().join().expect("server thread")
    }
}

fn read_http_request(stream: &mut std::net::TcpStream) -> String {
    stream
        .set_read_timeout(Some(Duration::from_secs(5)))
        .unwrap();
    let mut buf = Vec::new();
    let mut chunk = [0u8; 1024];
    // Read headers.
    let header_end = loop {
        let n = stream.read(&mut chunk).expect("read request");
        buf.extend_from_slice(&chunk[..n]);
        if let Some(pos) = find_subsequence(&buf, b"\r\n\r\n") {
            break pos + 4;
        }
        assert!(n > 0, "connection closed mid-headers");
    };
    let headers = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let content_length: usize = headers
        .lines()
        .find_map(|l| {
            let (name, value) = l.split_once(':')?;
            name.eq_ignore_ascii_case("content-length")
                .then(|| value.trim().parse().ok())?
        })
        .unwrap_or(0);
    while buf.len() < header_end + content_length {
        let n = stream.read(&mut chunk).expect("read body");
        assert!(n > 0, "connection closed mid-body");
        buf.extend_from_slice(&chunk[..n]);
    }
    format!(
        "{headers}{}",
        String::from_utf8_lossy(&buf[header_end..header_end + content_length])
    )
}

fn find_subsequence(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

fn config_for(url: &str, max_retries: u32) -> BackendConfig {
    BackendConfig {
        kind: BackendKind::HttpChat,
        endpoint_url: Some(url.to_string()),
        model_name: Some("test-model".to_string()),
        api_key_env: None,
        timeout: Duration::from_secs(5),
        max_retries,
        retry_backoff: Duration::from_millis(1),
        max_concurrent_requests: 2,
    }
}

const OK_BODY: &str = r#"{"choices":[{"message":{"role":"assistant","content":"return x"}}],"usage":{"prompt_tokens":12,"completion_tokens":3}}"#;

#[test]
fn success_extracts_text_and_usage() {
    let server = FakeServer::start(vec![(200, OK_BODY.to_string())]);
    let backend = HttpChatBackend::from_config(&config_for(&server.url(), 0)).unwrap();
    let resp = backend
        .generate(&GenRequest::actor("complete this".to_string()))
        .unwrap();
    assert_eq!(resp.text, "return x");
    assert_eq!(resp.backend_id, "http:test-model");
    let usage = resp.token_usage.unwrap();
    assert_eq!(usage.prompt_tokens, 12);
    assert_eq!(usage.completion_tokens, 3);

    let requests = server.finish();
    assert_eq!(requests.len(), 1);
    // Prompt travels as a single user message.
    let body = requests[0]
        .split_once("\r\n\r\n")
        .map(|(_, b)| b)
        .unwrap_or(&requests[0]);
    let parsed: serde_json::Value = serde_json::from_str(body).expect("request body is JSON");
    assert_eq!(parsed["model"], "test-model");
    assert_eq!(parsed["messages"][0]["role"], "user");
    assert_eq!(parsed["messages"][0]["content"], "complete this");
    assert_eq!(parsed["temperature"], 0.0);
}

#[test]
fn persistent_failure_retries_then_gives_up() {
    let error_body = r#"{"error":"overloaded"}"#.to_string();
    let server = FakeServer::start(vec![
        (500, error_body.clone()),
        (500, error_body.clone()),
        (500, error_body),
    ]);
    let backend = HttpChatBackend::from_config(&config_for(&server.url(), 2)).unwrap();
    let err = backend
        .generate(&GenRequest::actor("p".to_string()))
        .unwrap_err();
    match err {
        GatewayError::BackendUnavailable { attempts, .. } => assert_eq!(attempts, 3),
        other => panic!("expected BackendUnavailable, got {other:?}"),
    }
    assert_eq!(server.hits(), 3);
    server.finish();
}

#[test]
fn transient_failure_recovers() {
    let server = FakeServer::start(vec![
        (503, r#"{"error":"busy"}"#.to_string()),
        (200, OK_BODY.to_string()),
    ]);
    let backend = HttpChatBackend::from_config(&config_for(&server.url(), 3)).unwrap();
    let resp = backend
        .generate(&GenRequest::actor("p".to_string()))
        .unwrap();
    assert_eq!(resp.text, "return x");
    assert_eq!(server.hits(), 2);
    server.finish();
}

#[test]
fn client_error_fails_without_retry() {
    let server = FakeServer::start(vec![(401, r#"{"error":"bad key"}"#.to_string())]);
    let backend = HttpChatBackend::from_config(&config_for(&server.url(), 5)).unwrap();
    let err = backend
        .generate(&GenRequest::actor("p".to_string()))
        .unwrap_err();
    match err {
        GatewayError::BackendUnavailable { attempts, detail } => {
            assert_eq!(attempts, 1);
            assert!(detail.contains("401"));
        }
        other => panic!("expected BackendUnavailable, got {other:?}"),
    }
    assert_eq!(server.hits(), 1);
    server.finish();
}

#[test]
fn null_content_becomes_empty_text() {
    let body = r#"{"choices":[{"message":{"role":"assistant","content":null}}]}"#;
    let server = FakeServer::start(vec![(200, body.to_string())]);
    let backend = HttpChatBackend::from_config(&config_for(&server.url(), 0)).unwrap();
    let resp = backend
        .generate(&GenRequest::actor("p".to_string()))
        .unwrap();
    assert_eq!(resp.text, "");
    assert!(resp.token_usage.is_none());
    server.finish();
}

#[test]
fn api_key_is_sent_as_bearer() {
    std::env::set_var("REPOFLEX_GATEWAY_TEST_KEY", "sk-fixture");
    let server = FakeServer::start(vec![(200, OK_BODY.to_string())]);
    let mut config = config_for(&server.url(), 0);
    config.api_key_env = Some("REPOFLEX_GATEWAY_TEST_KEY".to_string());
    let backend = HttpChatBackend::from_config(&config).unwrap();
    backend
        .generate(&GenRequest::actor("p".to_string()))
        .unwrap();
    let requests = server.finish();
    assert!(requests[0]
        .to_lowercase()
        .contains("authorization: bearer sk-fixture"));
}

#[test]
fn missing_key_fails_before_any_request() {
    let server = FakeServer::start(vec![]);
    let mut config = config_for(&server.url(), 0);
    config.api_key_env = Some("REPOFLEX_GATEWAY_TEST_MISSING_KEY".to_string());
    let err = HttpChatBackend::from_config(&config).unwrap_err();
    assert!(matches!(err, GatewayError::Config(_)));
    assert_eq!(server.hits(), 0);
    server.finish();
}
