use std::collections::{HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

use super::prompt::prompt_hash;

/// Request/response shape of the HTTP backend.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    /// `POST {messages: [...]}` answered with `choices[0].message.content`.
    #[default]
    OpenAi,
    /// `POST {messages: [...]}` answered with `content[0].text`.
    Anthropic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub provider: Provider,
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API token.
    pub auth_env: Option<String>,
    pub max_retries: u32,
    pub timeout_secs: u64,
    /// First backoff delay; doubles on each retry.
    pub backoff_ms: u64,
    pub max_tokens: u32,
    /// Requests in flight at once.
    pub concurrency: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            provider: Provider::OpenAi,
            endpoint: "http://127.0.0.1:8080/v1/chat/completions".into(),
            model: "anthropic/claude-3-opus-20240229".into(),
            auth_env: None,
            max_retries: 4,
            timeout_secs: 120,
            backoff_ms: 500,
            max_tokens: 1024,
            concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheRecord {
    prompt_sha256: String,
    model: String,
    response: String,
}

#[derive(Default)]
struct CacheState {
    entries: HashMap<(String, String), String>,
    in_flight: HashSet<(String, String)>,
}

/// Append-only JSONL response cache keyed by (prompt hash, model id).
pub struct ResponseCache {
    path: Option<PathBuf>,
    state: Mutex<CacheState>,
    ready: Condvar,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            state: Mutex::new(CacheState::default()),
            ready: Condvar::new(),
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut state = CacheState::default();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(Error::io(path))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let r: CacheRecord = serde_json::from_str(line)
                    .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
                state.entries.insert((r.prompt_sha256, r.model), r.response);
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            state: Mutex::new(state),
            ready: Condvar::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, hash: &str, model: &str) -> Option<String> {
        self.state.lock().unwrap().entries.get(&(hash.to_string(), model.to_string())).cloned()
    }

    /// Returns the cached value or computes it, with at most one computation
    /// per key in flight.
    fn get_or_fetch(&self, hash: &str, model: &str, fetch: impl FnOnce() -> Result<String>) -> Result<String> {
        let key = (hash.to_string(), model.to_string());
        {
            let mut st = self.state.lock().unwrap();
            loop {
                if let Some(v) = st.entries.get(&key) {
                    return Ok(v.clone());
                }
                if !st.in_flight.contains(&key) {
                    st.in_flight.insert(key.clone());
                    break;
                }
                st = self.ready.wait(st).unwrap();
            }
        }
        let result = fetch().and_then(|v| self.append(&key, &v).map(|_| v));
        let mut st = self.state.lock().unwrap();
        st.in_flight.remove(&key);
        if let Ok(v) = &result {
            st.entries.insert(key, v.clone());
        }
        self.ready.notify_all();
        result
    }

    fn append(&self, key: &(String, String), response: &str) -> Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        let rec = CacheRecord {
            prompt_sha256: key.0.clone(),
            model: key.1.clone(),
            response: response.to_string(),
        };
        let mut line = serde_json::to_vec(&rec).map_err(|e| Error::Format(e.to_string()))?;
        line.push(b'\n');
        let _guard = self.state.lock().unwrap();
        let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(Error::io(path))?;
        f.write_all(&line).map_err(Error::io(path))
    }
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(Error),
}

/// Blocking chat client with caching and retries.
pub struct LlmClient {
    pub config: BackendConfig,
    cache: ResponseCache,
    agent: ureq::Agent,
    requests: AtomicUsize,
}

impl LlmClient {
    pub fn new(config: BackendConfig, cache: ResponseCache) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            config,
            cache,
            agent,
            requests: AtomicUsize::new(0),
        }
    }

    /// Network requests sent so far, retries included.
    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    /// Sends `prompt` as one user message and returns the reply text,
    /// answering from the cache when possible.
    pub fn call_llm(&self, prompt: &str) -> Result<String> {
        let hash = prompt_hash(prompt);
        self.cache.get_or_fetch(&hash, &self.config.model, || self.fetch(prompt))
    }

    fn token(&self) -> Result<Option<String>> {
        match &self.config.auth_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| Error::Config(format!("environment variable {var} is not set"))),
        }
    }

    fn fetch(&self, prompt: &str) -> Result<String> {
        let token = self.token()?;
        let body = json!({
            "model": self.config.model,
            "max_tokens": self.config.max_tokens,
            "messages": [{"role": "user", "content": prompt}],
        });
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 2).min(16));
                thread::sleep(Duration::from_millis(delay));
            }
            match self.attempt(&body, token.as_deref()) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(msg) => {
                    log::warn!("request attempt {attempt}/{attempts} failed: {msg}");
                    last = msg;
                }
            }
        }
        Err(Error::Transport { attempts, message: last })
    }

    fn attempt(&self, body: &Value, token: Option<&str>) -> Attempt {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let mut req = self.agent.post(&self.config.endpoint).header("content-type", "application/json");
        if let Some(t) = token {
            req = match self.config.provider {
                Provider::OpenAi => req.header("authorization", format!("Bearer {t}")),
                Provider::Anthropic => req.header("x-api-key", t),
            };
        }
        if self.config.provider == Provider::Anthropic {
            req = req.header("anthropic-version", "2023-06-01");
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        match status {
            200..=299 => match extract_text(self.config.provider, &text) {
                Some(t) => Attempt::Done(t),
                None => Attempt::Fatal(Error::Format(format!("unexpected response body: {}", truncate(&text)))),
            },
            401 | 403 => Attempt::Fatal(Error::Config(format!("backend rejected credentials (HTTP {status})"))),
            429 | 500..=599 => Attempt::Retry(format!("HTTP {status}")),
            _ => Attempt::Fatal(Error::Transport {
                attempts: 1,
                message: format!("HTTP {status}: {}", truncate(&text)),
            }),
        }
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(200).collect()
}

fn extract_text(provider: Provider, body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    let t = match provider {
        Provider::OpenAi => v.pointer("/choices/0/message/content")?,
        Provider::Anthropic => v.pointer("/content/0/text")?,
    };
    t.as_str().map(str::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_shapes() {
        let o = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}]}"#;
        let a = r#"{"content":[{"type":"text","text":"hey"}]}"#;
        assert_eq!(extract_text(Provider::OpenAi, o).as_deref(), Some("hi"));
        assert_eq!(extract_text(Provider::Anthropic, a).as_deref(), Some("hey"));
        assert_eq!(extract_text(Provider::OpenAi, a), None);
        assert_eq!(extract_text(Provider::OpenAi, "not json"), None);
    }

    #[test]
    fn cache_persists_and_dedups() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cache = ResponseCache::open(&path).unwrap();
        let mut calls = 0;
        for _ in 0..3 {
            let v = cache
                .get_or_fetch("h", "m", || {
                    calls += 1;
                    Ok("r".into())
                })
                .unwrap();
            assert_eq!(v, "r");
        }
        assert_eq!(calls, 1);
        assert!(cache.get_or_fetch("h2", "m", || Err(Error::Input("x".into()))).is_err());
        let reopened = ResponseCache::open(&path).unwrap();
        assert_eq!(reopened.len(), 1);
        assert_eq!(reopened.get("h", "m").as_deref(), Some("r"));
        assert_eq!(reopened.get("h", "other"), None);
    }

    #[test]
    fn missing_token_is_config_error() {
        let cfg = BackendConfig {
            auth_env: Some("CROSSDIFF_TEST_TOKEN_THAT_IS_NOT_SET".into()),
            ..BackendConfig::default()
        };
        let c = LlmClient::new(cfg, ResponseCache::in_memory());
        assert!(matches!(c.call_llm("x"), Err(Error::Config(_))));
        assert_eq!(c.requests_sent(), 0);
    }
}
