mod common;

use std::fs;
use std::sync::atomic::Ordering;

use crossdiff::annotation::{BackendConfig, LlmClient, ResponseCache};
use crossdiff::Error;

use common::{Behavior, MockServer};

fn config(url: &str) -> BackendConfig {
    BackendConfig {
        endpoint: url.into(),
        max_retries: 3,
        backoff_ms: 1,
        timeout_secs: 5,
        ..BackendConfig::default()
    }
}

fn statuses(statuses: &[u16], text: &str) -> MockServer {
    MockServer::start(Behavior::Statuses { statuses: statuses.to_vec(), text: text.into() })
}

#[test]
fn cached_prompt_is_not_resent() {
    let server = statuses(&[], "hello");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    let client = LlmClient::new(config(&server.url), ResponseCache::open(&path).unwrap());
    assert_eq!(client.call_llm("p").unwrap(), "hello");
    assert_eq!(client.call_llm("p").unwrap(), "hello");
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);

    let reopened = LlmClient::new(config(&server.url), ResponseCache::open(&path).unwrap());
    assert_eq!(reopened.call_llm("p").unwrap(), "hello");
    assert_eq!(reopened.requests_sent(), 0);
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn server_errors_are_retried() {
    let server = statuses(&[500, 429], "ok");
    let client = LlmClient::new(config(&server.url), ResponseCache::in_memory());
    assert_eq!(client.call_llm("x").unwrap(), "ok");
    assert_eq!(server.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn exhausted_retries_report_attempts() {
    let server = statuses(&[503; 10], "never");
    let client = LlmClient::new(config(&server.url), ResponseCache::in_memory());
    match client.call_llm("x") {
        Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 4),
        other => panic!("{other:?}"),
    }
    assert_eq!(server.hits.load(Ordering::SeqCst), 4);
}

#[test]
fn rejected_credentials_are_not_retried() {
    let server = statuses(&[401], "");
    let client = LlmClient::new(config(&server.url), ResponseCache::in_memory());
    assert!(matches!(client.call_llm("x"), Err(Error::Config(_))));
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn client_errors_fail_fast() {
    let server = statuses(&[400], "");
    let client = LlmClient::new(config(&server.url), ResponseCache::in_memory());
    assert!(matches!(client.call_llm("x"), Err(Error::Transport { attempts: 1, .. })));
}

#[test]
fn unreachable_backend() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    drop(listener);
    let client = LlmClient::new(BackendConfig { max_retries: 1, ..config(&url) }, ResponseCache::in_memory());
    assert!(matches!(client.call_llm("x"), Err(Error::Transport { attempts: 2, .. })));
}

#[test]
fn token_is_sent_but_never_cached() {
    let server = statuses(&[], "fine");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    let var = "CROSSDIFF_TEST_TOKEN_7F3A";
    std::env::set_var(var, "s3cr3t-value");
    let cfg = BackendConfig { auth_env: Some(var.into()), ..config(&server.url) };
    let client = LlmClient::new(cfg, ResponseCache::open(&path).unwrap());
    client.call_llm("q").unwrap();
    let seen = server.recorded.lock().unwrap().auth_headers.clone();
    assert_eq!(seen, vec![Some("Bearer s3cr3t-value".to_string())]);
    assert!(!fs::read_to_string(&path).unwrap().contains("s3cr3t"));
}

#[test]
fn missing_token_variable_is_a_config_error() {
    let server = statuses(&[], "fine");
    let cfg = BackendConfig { auth_env: Some("CROSSDIFF_TEST_UNSET_VAR_91".into()), ..config(&server.url) };
    let client = LlmClient::new(cfg, ResponseCache::in_memory());
    assert!(matches!(client.call_llm("q"), Err(Error::Config(_))));
    assert_eq!(server.hits.load(Ordering::SeqCst), 0);
}

#[test]
fn concurrent_identical_prompts_share_one_request() {
    let server = statuses(&[], "once");
    let client = LlmClient::new(config(&server.url), ResponseCache::in_memory());
    std::thread::scope(|s| {
        for _ in 0..8 {
            s.spawn(|| assert_eq!(client.call_llm("same").unwrap(), "once"));
        }
    });
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}
