use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use convo_rewrite::llm::{
    CacheKey, CachedBackend, HttpBackend, HttpConfig, MockBackend, ResponseCache, RetryPolicy, API_KEY_ENV,
};
use convo_rewrite::{BackendError, ChatBackend, ChatMessage, CompletionParams, Role};
use serde_json::Value;

/// Serves the scripted `(status, body)` replies in order, one per connection.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<(String, Value)>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut auth = String::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line["authorization:".len()..].trim().to_string();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push((auth, serde_json::from_slice(&buf).unwrap()));
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn ok_body(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn backend(url: &str) -> HttpBackend {
    HttpBackend::new(HttpConfig {
        endpoint: url.to_string(),
        api_key: "sk-test".into(),
        max_in_flight: 2,
        retry: RetryPolicy { max_attempts: 3, base_delay: Duration::from_millis(1) },
    })
    .unwrap()
}

fn messages() -> Vec<ChatMessage> {
    vec![ChatMessage::new(Role::System, "scope"), ChatMessage::new(Role::User, "Is it treatable?")]
}

#[test]
fn http_success_sends_wire_format() {
    let (url, seen) = serve(vec![(200, ok_body("Is throat cancer treatable?"))]);
    let params = CompletionParams { temperature: 0.0, max_output_tokens: 64, ..Default::default() };
    let out = backend(&url).complete(&messages(), &params).unwrap();
    assert_eq!(out, "Is throat cancer treatable?");
    let seen = seen.lock().unwrap();
    let (auth, body) = &seen[0];
    assert_eq!(auth, "Bearer sk-test");
    assert_eq!(body["model"], "gpt-3.5-turbo");
    assert_eq!(body["max_tokens"], 64);
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "Is it treatable?");
}

#[test]
fn http_retries_server_errors() {
    let (url, seen) = serve(vec![(500, "{}".into()), (429, "{}".into()), (200, ok_body("done"))]);
    assert_eq!(backend(&url).complete(&messages(), &CompletionParams::default()).unwrap(), "done");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn http_gives_up_after_max_attempts() {
    let (url, seen) = serve(vec![(503, "{}".into()); 3]);
    match backend(&url).complete(&messages(), &CompletionParams::default()) {
        Err(BackendError::RetriesExhausted { attempts: 3, .. }) => {}
        other => panic!("{other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn http_does_not_retry_auth_failures() {
    let (url, seen) = serve(vec![(401, "{\"error\":\"bad key\"}".into()), (200, ok_body("never"))]);
    match backend(&url).complete(&messages(), &CompletionParams::default()) {
        Err(BackendError::Status { status: 401, body }) => assert!(body.contains("bad key")),
        other => panic!("{other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn http_rejects_malformed_bodies() {
    let (url, _) = serve(vec![(200, "{\"choices\": []}".into())]);
    assert!(matches!(
        backend(&url).complete(&messages(), &CompletionParams::default()),
        Err(BackendError::MalformedBody(_))
    ));
}

#[test]
fn invalid_params_fail_before_any_request() {
    let params = CompletionParams { temperature: 3.0, ..Default::default() };
    // nothing listens here; validation must fail first
    let b = backend("http://127.0.0.1:9/v1/chat/completions");
    assert!(matches!(b.complete(&messages(), &params), Err(BackendError::InvalidParams(_))));
}

#[test]
fn missing_api_key_is_reported() {
    std::env::remove_var(API_KEY_ENV);
    match HttpConfig::from_env("http://localhost") {
        Err(BackendError::MissingApiKey(name)) => assert_eq!(name, API_KEY_ENV),
        other => panic!("{other:?}"),
    }
}

#[test]
fn cache_hits_skip_the_backend() {
    let dir = tempfile::tempdir().unwrap();
    let params = CompletionParams::default();
    let cached = CachedBackend::new(
        MockBackend::from_pairs([("Is it treatable?", "Is throat cancer treatable?")]),
        ResponseCache::new(dir.path()),
    );
    let first = cached.complete(&messages(), &params).unwrap();
    let second = cached.complete(&messages(), &params).unwrap();
    assert_eq!(first, second);
    assert_eq!((cached.hits(), cached.misses(), cached.inner().calls()), (1, 1, 1));

    // a different temperature is a different request
    let warmer = CompletionParams { temperature: 0.7, ..Default::default() };
    cached.complete(&messages(), &warmer).unwrap();
    assert_eq!((cached.misses(), cached.inner().calls()), (2, 2));
    assert_eq!(cached.cache().len(), 2);

    // a fresh wrapper over the same directory starts warm
    let again = CachedBackend::new(MockBackend::default(), ResponseCache::new(dir.path()));
    assert_eq!(again.complete(&messages(), &params).unwrap(), first);
    assert_eq!(again.inner().calls(), 0);
}

#[test]
fn corrupt_cache_entry_is_a_miss() {
    let dir = tempfile::tempdir().unwrap();
    let params = CompletionParams::default();
    let cache = ResponseCache::new(dir.path());
    let key = CacheKey::for_request(&messages(), &params);
    cache.put(&key, &params, "stored").unwrap();
    assert_eq!(cache.get(&key).as_deref(), Some("stored"));
    std::fs::write(cache.path_for(&key), b"{ not json").unwrap();
    assert_eq!(cache.get(&key), None);

    let cached = CachedBackend::new(MockBackend::default(), ResponseCache::new(dir.path()));
    assert_eq!(cached.complete(&messages(), &params).unwrap(), "Is it treatable?");
    assert_eq!(cached.misses(), 1);
    // rewritten on the miss
    assert_eq!(cache.get(&key).as_deref(), Some("Is it treatable?"));
}

#[test]
fn cache_keys_are_content_addressed() {
    let p = CompletionParams::default();
    let a = CacheKey::for_request(&messages(), &p);
    assert_eq!(a, CacheKey::for_request(&messages(), &p));
    let mut other = messages();
    other[1] = ChatMessage::new(Role::User, "Is it curable?");
    assert_ne!(a, CacheKey::for_request(&other, &p));
    let model = CompletionParams { model_name: "other".into(), ..Default::default() };
    assert_ne!(a, CacheKey::for_request(&messages(), &model));
    assert_eq!(a.hex().len(), 64);
}
