//! Live chat-completion adapter and cassette replay.
//!
//! The HTTP backend posts a single user message with the prompt text and the
//! attachments inlined as base64 data URLs, enforces a concurrent-request cap
//! and a token-bucket rate limit, and appends every exchange to a cassette
//! (JSON lines of `{"hash", "task", "response"}`) so recorded sessions can be
//! replayed offline by [`ReplayBackend`].

use super::{AttachmentRef, BackendQuery, ChatBackend, ClientError};
use crate::rng;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpClientConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token; unset means no auth
    /// header.
    pub auth_token_env: Option<String>,
    pub timeout_s: u64,
    /// Temperature 0 by default: reproducibility over diversity.
    pub temperature: f64,
    pub max_concurrent: usize,
    pub requests_per_second: f64,
    /// Cassette file to append exchanges to.
    pub cassette: Option<PathBuf>,
}

impl Default for HttpClientConfig {
    fn default() -> Self {
        HttpClientConfig {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "default".into(),
            auth_token_env: None,
            timeout_s: 120,
            temperature: 0.0,
            max_concurrent: 4,
            requests_per_second: 2.0,
            cassette: None,
        }
    }
}

/// Token bucket with an injectable clock, so refill arithmetic is testable.
pub struct TokenBucket {
    capacity: f64,
    tokens: f64,
    rate_per_s: f64,
    last_refill: Instant,
}

impl TokenBucket {
    pub fn new(rate_per_s: f64, capacity: f64) -> Self {
        TokenBucket {
            capacity,
            tokens: capacity,
            rate_per_s,
            last_refill: Instant::now(),
        }
    }

    /// Takes one token at time `now`, or returns how long to wait.
    pub fn try_take(&mut self, now: Instant) -> Result<(), Duration> {
        let elapsed = now.saturating_duration_since(self.last_refill).as_secs_f64();
        self.tokens = (self.tokens + elapsed * self.rate_per_s).min(self.capacity);
        self.last_refill = now;
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            Ok(())
        } else {
            let deficit = 1.0 - self.tokens;
            Err(Duration::from_secs_f64(deficit / self.rate_per_s))
        }
    }
}

/// Counting semaphore over Mutex + Condvar.
struct Gate {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Gate {
    fn new(permits: usize) -> Self {
        Gate {
            permits: Mutex::new(permits.max(1)),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) {
        let mut permits = self.permits.lock().expect("gate lock");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("gate wait");
        }
        *permits -= 1;
    }

    fn release(&self) {
        *self.permits.lock().expect("gate lock") += 1;
        self.available.notify_one();
    }
}

/// Stable 128-bit hash of a query, used as the cassette key: covers the task
/// tag, prompt text, and attachment paths.
pub fn request_hash(task: &str, text: &str, attachments: &[AttachmentRef]) -> String {
    let mut canonical = String::new();
    canonical.push_str(task);
    canonical.push('\u{1f}');
    canonical.push_str(text);
    for attachment in attachments {
        canonical.push('\u{1f}');
        canonical.push_str(&attachment.describe());
    }
    let lo = rng::hash_bytes(canonical.as_bytes());
    let hi = rng::hash_bytes(format!("{lo:016x}{canonical}").as_bytes());
    format!("{hi:016x}{lo:016x}")
}

#[derive(Debug, Serialize, Deserialize)]
struct CassetteLine {
    hash: String,
    task: String,
    response: String,
}

pub struct HttpBackend {
    config: HttpClientConfig,
    client: reqwest::blocking::Client,
    bucket: Mutex<TokenBucket>,
    gate: Gate,
    cassette: Option<Mutex<std::fs::File>>,
}

impl HttpBackend {
    pub fn new(config: HttpClientConfig) -> Result<Self, ClientError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_s))
            .build()
            .map_err(|e| ClientError::Unavailable {
                reason: format!("failed to build http client: {e}"),
                raw: None,
            })?;
        let cassette = match &config.cassette {
            Some(path) => {
                let file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| ClientError::Unavailable {
                        reason: format!("cannot open cassette {}: {e}", path.display()),
                        raw: None,
                    })?;
                Some(Mutex::new(file))
            }
            None => None,
        };
        Ok(HttpBackend {
            bucket: Mutex::new(TokenBucket::new(
                config.requests_per_second.max(0.01),
                config.requests_per_second.max(1.0),
            )),
            gate: Gate::new(config.max_concurrent),
            client,
            config,
            cassette,
        })
    }

    fn wait_for_token(&self) {
        loop {
            let wait = {
                let mut bucket = self.bucket.lock().expect("bucket lock");
                match bucket.try_take(Instant::now()) {
                    Ok(()) => return,
                    Err(wait) => wait,
                }
            };
            std::thread::sleep(wait);
        }
    }

    fn attachment_part(&self, attachment: &AttachmentRef) -> Result<Value, ClientError> {
        match attachment {
            AttachmentRef::Image(path) => {
                let bytes = std::fs::read(path).map_err(|e| ClientError::Unavailable {
                    reason: format!(
                        "attachment {} cannot be read for inline upload: {e}",
                        path.display()
                    ),
                    raw: None,
                })?;
                let mime = match path.extension().and_then(|e| e.to_str()) {
                    Some("jpg") | Some("jpeg") => "image/jpeg",
                    _ => "image/png",
                };
                let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
                Ok(json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:{mime};base64,{encoded}")}
                }))
            }
        }
    }

    fn record(&self, hash: &str, task: &str, response: &str) {
        if let Some(cassette) = &self.cassette {
            let line = CassetteLine {
                hash: hash.to_string(),
                task: task.to_string(),
                response: response.to_string(),
            };
            if let Ok(mut file) = cassette.lock() {
                if let Ok(serialized) = serde_json::to_string(&line) {
                    let _ = writeln!(file, "{serialized}");
                }
            }
        }
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, query: &BackendQuery<'_>) -> Result<String, ClientError> {
        self.gate.acquire();
        let result = self.complete_inner(query);
        self.gate.release();
        result
    }

    fn name(&self) -> &'static str {
        "http"
    }
}

impl HttpBackend {
    fn complete_inner(&self, query: &BackendQuery<'_>) -> Result<String, ClientError> {
        self.wait_for_token();

        let mut content = vec![json!({"type": "text", "text": query.text})];
        for attachment in query.attachments {
            content.push(self.attachment_part(attachment)?);
        }
        let body = json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [{"role": "user", "content": content}],
        });

        let mut request = self.client.post(&self.config.endpoint).json(&body);
        if let Some(env_var) = &self.config.auth_token_env {
            match std::env::var(env_var) {
                Ok(token) => request = request.bearer_auth(token),
                Err(_) => {
                    return Err(ClientError::Unavailable {
                        reason: format!("auth env var {env_var} is not set"),
                        raw: None,
                    })
                }
            }
        }

        let response = request.send().map_err(|e| ClientError::Unavailable {
            reason: format!("transport failure: {e}"),
            raw: None,
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| ClientError::Unavailable {
            reason: format!("failed reading response body: {e}"),
            raw: None,
        })?;
        if !status.is_success() {
            return Err(ClientError::Unavailable {
                reason: format!("endpoint returned {status}"),
                raw: Some(text),
            });
        }
        let parsed: Value = serde_json::from_str(&text).map_err(|e| ClientError::Unavailable {
            reason: format!("endpoint returned non-JSON body: {e}"),
            raw: Some(text.clone()),
        })?;
        let content = parsed["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| ClientError::Unavailable {
                reason: "response lacks choices[0].message.content".into(),
                raw: Some(text.clone()),
            })?
            .to_string();

        let hash = request_hash(query.task.name(), query.text, query.attachments);
        self.record(&hash, query.task.name(), &content);
        Ok(content)
    }
}

/// Serves recorded responses from a cassette file; any unrecorded request is
/// a transport failure.
pub struct ReplayBackend {
    responses: BTreeMap<String, String>,
}

impl ReplayBackend {
    pub fn load(path: &Path) -> Result<Self, ClientError> {
        let text = std::fs::read_to_string(path).map_err(|e| ClientError::Unavailable {
            reason: format!("cannot read cassette {}: {e}", path.display()),
            raw: None,
        })?;
        let mut responses = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let parsed: CassetteLine =
                serde_json::from_str(line).map_err(|e| ClientError::Unavailable {
                    reason: format!("malformed cassette line: {e}"),
                    raw: Some(line.to_string()),
                })?;
            responses.insert(parsed.hash, parsed.response);
        }
        Ok(ReplayBackend { responses })
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, query: &BackendQuery<'_>) -> Result<String, ClientError> {
        let hash = request_hash(query.task.name(), query.text, query.attachments);
        self.responses
            .get(&hash)
            .cloned()
            .ok_or_else(|| ClientError::Unavailable {
                reason: format!("cassette has no response for request {hash}"),
                raw: None,
            })
    }

    fn name(&self) -> &'static str {
        "replay"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{
        PerceptionClient, PerceptionRequest, RequestMeta, ResponseSchema, TaskKind,
    };
    use std::io::{BufRead, BufReader, Read};
    use std::net::TcpListener;

    #[test]
    fn token_bucket_refill_arithmetic() {
        let start = Instant::now();
        let mut bucket = TokenBucket::new(2.0, 2.0);
        assert!(bucket.try_take(start).is_ok());
        assert!(bucket.try_take(start).is_ok());
        let wait = bucket.try_take(start).unwrap_err();
        assert!((wait.as_secs_f64() - 0.5).abs() < 1e-9, "wait {wait:?}");
        // Half a second later one token has refilled.
        assert!(bucket.try_take(start + Duration::from_millis(500)).is_ok());
        assert!(bucket.try_take(start + Duration::from_millis(500)).is_err());
    }

    #[test]
    fn request_hash_is_stable_and_input_sensitive() {
        let a = request_hash("caption", "describe", &[]);
        let b = request_hash("caption", "describe", &[]);
        assert_eq!(a, b);
        assert_ne!(a, request_hash("caption", "describe!", &[]));
        assert_ne!(
            a,
            request_hash(
                "caption",
                "describe",
                &[AttachmentRef::Image("x.png".into())]
            )
        );
    }

    /// Minimal one-shot HTTP fixture server returning a canned
    /// chat-completion payload.
    fn spawn_fixture(reply_content: &str, hits: usize) -> (String, std::thread::JoinHandle<()>) {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind fixture server");
        let address = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let body = serde_json::to_string(&json!({
            "choices": [{"message": {"role": "assistant", "content": reply_content}}]
        }))
        .unwrap();
        let handle = std::thread::spawn(move || {
            for _ in 0..hits {
                let (mut stream, _) = listener.accept().expect("accept");
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(rest) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        content_length = rest.trim().parse().unwrap_or(0);
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut payload = vec![0u8; content_length];
                reader.read_exact(&mut payload).unwrap();
                let response = format!(
                    "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{}",
                    body.len(),
                    body
                );
                use std::io::Write as _;
                stream.write_all(response.as_bytes()).unwrap();
            }
        });
        (address, handle)
    }

    #[test]
    fn live_adapter_parses_fixture_and_replay_is_byte_identical() {
        let canned = r#"{"label": "exploring", "description": "slow walk along the wall"}"#;
        let (endpoint, server) = spawn_fixture(canned, 1);
        let dir = tempfile::tempdir().unwrap();
        let cassette_path = dir.path().join("cassette.jsonl");

        let backend = HttpBackend::new(HttpClientConfig {
            endpoint,
            cassette: Some(cassette_path.clone()),
            ..HttpClientConfig::default()
        })
        .unwrap();
        let client = PerceptionClient::new(Box::new(backend));
        let image = dir.path().join("clip.png");
        std::fs::write(&image, b"\x89PNG\r\n\x1a\nfakebytes").unwrap();
        let request = PerceptionRequest {
            task: TaskKind::Caption,
            prompt: "describe the clip".into(),
            attachments: vec![AttachmentRef::Image(image)],
            schema: ResponseSchema::Caption,
            max_retries: 0,
            meta: RequestMeta::default(),
        };
        let live = client.call(&request).unwrap();
        assert_eq!(live.raw, canned);
        assert_eq!(live.payload["label"], "exploring");
        server.join().unwrap();

        // Replay the cassette offline: byte-identical raw text.
        let replay = PerceptionClient::new(Box::new(
            ReplayBackend::load(&cassette_path).unwrap(),
        ));
        let replayed = replay.call(&request).unwrap();
        assert_eq!(replayed.raw, live.raw);
        assert_eq!(replayed.payload, live.payload);

        // A different prompt is a cassette miss.
        let mut other = request.clone();
        other.prompt = "different".into();
        assert!(matches!(
            replay.call(&other),
            Err(ClientError::Unavailable { .. })
        ));
    }
}
