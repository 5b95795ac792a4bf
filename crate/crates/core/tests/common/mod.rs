//! Minimal HTTP backend speaking the chat-completions shape, for tests.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

#[derive(Clone)]
pub enum Behavior {
    /// Interprets and categorizes like a cooperative model. Prompts whose
    /// byte sum is divisible by `garble_every` get an unparseable reply.
    Annotator { garble_every: Option<u64> },
    /// Answers each request with the next status; after the list runs out,
    /// answers 200 with `text`.
    Statuses { statuses: Vec<u16>, text: String },
}

#[derive(Default)]
pub struct Recorded {
    pub prompts: Vec<String>,
    pub auth_headers: Vec<Option<String>>,
}

pub struct MockServer {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
    pub recorded: Arc<Mutex<Recorded>>,
}

pub const CATEGORY_CODES: [&str; 6] = ["A.1", "B.7", "C.10", "E.19", "F.22", "G.24"];

fn byte_sum(s: &str) -> u64 {
    s.bytes().map(u64::from).sum()
}

pub fn annotator_reply(prompt: &str, garble_every: Option<u64>) -> String {
    let sum = byte_sum(prompt);
    if garble_every.is_some_and(|g| sum % g == 0) {
        return "I am not able to say anything about these documents.".into();
    }
    if prompt.contains("Respond with exactly one category code") {
        let label = prompt.lines().find(|l| l.starts_with("Latent label:")).unwrap_or("");
        let code = CATEGORY_CODES[(byte_sum(label) % CATEGORY_CODES.len() as u64) as usize];
        return format!("{code}\nThe pattern fits this category best.");
    }
    format!(
        "1. Common patterns: the documents repeat token groups.\n2. Label: Pattern {}\n3. Description: Fires on recurring token groups in the shown documents.\n4. Confidence: medium",
        sum % 97
    )
}

impl MockServer {
    pub fn start(behavior: Behavior) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let recorded = Arc::new(Mutex::new(Recorded::default()));
        let (h, r) = (hits.clone(), recorded.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let (h, r, b) = (h.clone(), r.clone(), behavior.clone());
                thread::spawn(move || serve(stream, &h, &r, &b));
            }
        });
        Self { url, hits, recorded }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.recorded.lock().unwrap().prompts.clone()
    }
}

fn serve(stream: TcpStream, hits: &AtomicUsize, recorded: &Mutex<Recorded>, behavior: &Behavior) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0usize;
    let mut auth = None;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            match k.to_ascii_lowercase().as_str() {
                "content-length" => len = v.trim().parse().unwrap_or(0),
                "authorization" | "x-api-key" => auth = Some(v.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0u8; len];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let n = hits.fetch_add(1, Ordering::SeqCst);
    let req: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
    let prompt = req.pointer("/messages/0/content").and_then(|v| v.as_str()).unwrap_or("").to_string();
    {
        let mut r = recorded.lock().unwrap();
        r.prompts.push(prompt.clone());
        r.auth_headers.push(auth);
    }
    let (status, text) = match behavior {
        Behavior::Annotator { garble_every } => (200, annotator_reply(&prompt, *garble_every)),
        Behavior::Statuses { statuses, text } => (statuses.get(n).copied().unwrap_or(200), text.clone()),
    };
    let payload = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string();
    let mut s = stream;
    let _ = write!(
        s,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    let _ = s.flush();
}

/// Synthetic desk-scale pipeline that selects unique latents on both sides.
pub const PIPELINE_CONFIG: &str = r#"
[synth]
d_model = 32
latents = 64
unique_a = 4
unique_b = 4
k = 3
tokens = 30000
doc_len = 100
topic_size = 12

[train]
latents = 128
k = 6
steps = 1500

[scaling]
token_budget = 30000

[exemplars]
n = 5

[annotation]
max_retries = 1
backoff_ms = 10
"#;
