//! Completion backends: live chat-completions HTTP, scripted mock, and
//! record/replay cassettes keyed by a hash of the full request text.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llmpolicy::PromptPair;

pub const ENV_API_BASE: &str = "CC_LLM_API_BASE";
pub const ENV_API_KEY: &str = "CC_LLM_API_KEY";
pub const ENV_MODEL: &str = "CC_LLM_MODEL";
pub const DEFAULT_MODEL: &str = "gpt-4o-mini";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("live request failed after {attempts} attempt(s): {message}")]
    LiveError { attempts: u32, message: String },
    #[error("no cassette entry for key {0}")]
    ReplayMiss(String),
    #[error("mock script exhausted after {0} response(s)")]
    ScriptExhausted(usize),
    #[error("environment variable {0} is not set")]
    MissingEnv(&'static str),
    #[error("cassette line {line}: {message}")]
    BadCassette { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_name: String,
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    /// Policy consults always run at temperature 0.
    pub fn for_prompt(model: &str, prompt: &PromptPair) -> Self {
        ChatRequest {
            model_name: model.to_string(),
            system_text: prompt.system.clone(),
            user_text: prompt.user.clone(),
            temperature: 0.0,
            max_tokens: 256,
        }
    }

    /// SHA-256 over the length-prefixed model, system and user texts.
    pub fn key(&self) -> String {
        let mut h = Sha256::new();
        for part in [&self.model_name, &self.system_text, &self.user_text] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub trait LlmBackend: Send {
    fn complete(&mut self, req: &ChatRequest) -> Result<String, ClientError>;

    fn name(&self) -> &'static str;
}

/// Returns scripted responses in order, optionally wrapping around.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockBackend {
    pub responses: Vec<String>,
    #[serde(default)]
    pub cycle: bool,
    #[serde(skip)]
    next: usize,
}

impl MockBackend {
    pub fn new(responses: Vec<String>) -> Self {
        MockBackend { responses, cycle: false, next: 0 }
    }

    pub fn cycling(responses: Vec<String>) -> Self {
        MockBackend { responses, cycle: true, next: 0 }
    }

    /// Script file: `{"responses": [...], "cycle": bool}`.
    pub fn from_file(path: &Path) -> Result<Self, ClientError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| ClientError::BadCassette { line: e.line(), message: e.to_string() })
    }

    pub fn calls(&self) -> usize {
        self.next
    }
}

impl LlmBackend for MockBackend {
    fn complete(&mut self, _req: &ChatRequest) -> Result<String, ClientError> {
        let n = self.responses.len();
        if n == 0 || (!self.cycle && self.next >= n) {
            return Err(ClientError::ScriptExhausted(self.next));
        }
        let text = self.responses[self.next % n].clone();
        self.next += 1;
        Ok(text)
    }

    fn name(&self) -> &'static str {
        "mock"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub key: String,
    pub response_text: String,
    /// Unix seconds.
    pub recorded_at: u64,
}

/// In-memory cassette, optionally bound to a JSON-lines file.
#[derive(Debug, Clone, Default)]
pub struct Cassette {
    entries: Vec<CassetteEntry>,
    index: HashMap<String, usize>,
    path: Option<PathBuf>,
}

impl Cassette {
    pub fn new() -> Self {
        Cassette::default()
    }

    /// Loads a cassette; later lines win on duplicate keys. A missing file
    /// yields an empty cassette bound to that path.
    pub fn open(path: &Path) -> Result<Self, ClientError> {
        let mut c = Cassette { path: Some(path.to_path_buf()), ..Cassette::default() };
        if !path.exists() {
            return Ok(c);
        }
        let reader = BufReader::new(fs::File::open(path)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry = serde_json::from_str(&line)
                .map_err(|e| ClientError::BadCassette { line: i + 1, message: e.to_string() })?;
            c.insert(entry);
        }
        Ok(c)
    }

    fn insert(&mut self, entry: CassetteEntry) {
        match self.index.get(&entry.key) {
            Some(&i) => self.entries[i] = entry,
            None => {
                self.index.insert(entry.key.clone(), self.entries.len());
                self.entries.push(entry);
            }
        }
    }

    pub fn lookup(&self, req: &ChatRequest) -> Option<&str> {
        self.index.get(&req.key()).map(|&i| self.entries[i].response_text.as_str())
    }

    /// Stores a response (latest wins) and rewrites the bound file, if any.
    pub fn record(&mut self, req: &ChatRequest, response_text: &str) -> Result<(), ClientError> {
        let recorded_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.insert(CassetteEntry { key: req.key(), response_text: response_text.to_string(), recorded_at });
        match self.path.clone() {
            Some(p) => self.save(&p),
            None => Ok(()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ClientError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn entries(&self) -> &[CassetteEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Strict replay: unseen requests are an error.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    pub cassette: Cassette,
}

impl ReplayBackend {
    pub fn new(cassette: Cassette) -> Self {
        ReplayBackend { cassette }
    }
}

impl LlmBackend for ReplayBackend {
    fn complete(&mut self, req: &ChatRequest) -> Result<String, ClientError> {
        self.cassette.lookup(req).map(str::to_string).ok_or_else(|| ClientError::ReplayMiss(req.key()))
    }

    fn name(&self) -> &'static str {
        "replay"
    }
}

/// Forwards to an inner backend and records every response.
pub struct RecordingBackend {
    pub inner: Box<dyn LlmBackend>,
    pub cassette: Cassette,
}

impl RecordingBackend {
    pub fn new(inner: Box<dyn LlmBackend>, cassette: Cassette) -> Self {
        RecordingBackend { inner, cassette }
    }
}

impl LlmBackend for RecordingBackend {
    fn complete(&mut self, req: &ChatRequest) -> Result<String, ClientError> {
        let text = self.inner.complete(req)?;
        self.cassette.record(req, &text)?;
        Ok(text)
    }

    fn name(&self) -> &'static str {
        "record"
    }
}

/// Any chat-completions compatible endpoint.
#[derive(Debug, Clone)]
pub struct LiveBackend {
    pub api_base: String,
    pub api_key: Option<String>,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

impl LiveBackend {
    pub fn new(api_base: &str, api_key: Option<String>) -> Self {
        LiveBackend {
            api_base: api_base.trim_end_matches('/').to_string(),
            api_key,
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(60),
        }
    }

    pub fn from_env() -> Result<Self, ClientError> {
        let base = std::env::var(ENV_API_BASE).map_err(|_| ClientError::MissingEnv(ENV_API_BASE))?;
        Ok(LiveBackend::new(&base, std::env::var(ENV_API_KEY).ok()))
    }

    fn body(req: &ChatRequest) -> serde_json::Value {
        serde_json::json!({
            "model": req.model_name,
            "messages": [
                {"role": "system", "content": req.system_text},
                {"role": "user", "content": req.user_text},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        })
    }

    /// One attempt. `Err((retryable, message))` on failure.
    fn attempt(&self, agent: &ureq::Agent, req: &ChatRequest) -> Result<String, (bool, String)> {
        let url = format!("{}/chat/completions", self.api_base);
        let mut call = agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call.send(Self::body(req).to_string()).map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| (true, e.to_string()))?;
        if status != 200 {
            let retryable = status == 429 || status >= 500;
            return Err((retryable, format!("HTTP {status}: {}", text.chars().take(200).collect::<String>())));
        }
        let parsed: Completion = serde_json::from_str(&text).map_err(|e| (false, format!("bad body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or((false, "response has no choices".to_string()))
    }
}

impl LlmBackend for LiveBackend {
    fn complete(&mut self, req: &ChatRequest) -> Result<String, ClientError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut backoff = self.initial_backoff;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&agent, req) {
                Ok(text) => return Ok(text),
                Err((retryable, message)) => {
                    if !retryable || attempts > self.max_retries {
                        return Err(ClientError::LiveError { attempts, message });
                    }
                    log::warn!("llm request attempt {attempts} failed: {message}; retrying");
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
    }

    fn name(&self) -> &'static str {
        "live"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(user: &str) -> ChatRequest {
        ChatRequest::for_prompt("m", &PromptPair { system: "sys".into(), user: user.into() })
    }

    #[test]
    fn temperature_pinned() {
        assert_eq!(req("x").temperature, 0.0);
    }

    #[test]
    fn key_is_content_only() {
        assert_eq!(req("a").key(), req("a").key());
        assert_ne!(req("a").key(), req("b").key());
        assert_eq!(req("a").key().len(), 64);
        assert!(req("a").key().chars().all(|c| c.is_ascii_digit() || ('a'..='f').contains(&c)));
        // length prefixing keeps field boundaries apart
        let a = ChatRequest { system_text: "ab".into(), user_text: "c".into(), ..req("") };
        let b = ChatRequest { system_text: "a".into(), user_text: "bc".into(), ..req("") };
        assert_ne!(a.key(), b.key());
    }

    #[test]
    fn mock_order_and_exhaustion() {
        let mut m = MockBackend::new(vec!["hold".into(), "decrease".into()]);
        assert_eq!(m.complete(&req("x")).unwrap(), "hold");
        assert_eq!(m.complete(&req("x")).unwrap(), "decrease");
        assert!(matches!(m.complete(&req("x")), Err(ClientError::ScriptExhausted(2))));
        let mut c = MockBackend::cycling(vec!["a".into(), "b".into()]);
        let got: Vec<String> = (0..3).map(|_| c.complete(&req("x")).unwrap()).collect();
        assert_eq!(got, ["a", "b", "a"]);
    }

    #[test]
    fn cassette_round_trip_and_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut c = Cassette::open(&path).unwrap();
        c.record(&req("a"), "first").unwrap();
        c.record(&req("b"), "other").unwrap();
        c.record(&req("a"), "second").unwrap();
        assert_eq!(c.len(), 2);
        let loaded = Cassette::open(&path).unwrap();
        assert_eq!(loaded.lookup(&req("a")), Some("second"));
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 2);

        let mut replay = ReplayBackend::new(loaded);
        assert_eq!(replay.complete(&req("b")).unwrap(), "other");
        assert!(matches!(replay.complete(&req("zzz")), Err(ClientError::ReplayMiss(_))));
    }

    #[test]
    fn recording_wraps_inner() {
        let mut rec = RecordingBackend::new(Box::new(MockBackend::new(vec!["r1".into()])), Cassette::new());
        assert_eq!(rec.complete(&req("q")).unwrap(), "r1");
        assert_eq!(rec.cassette.lookup(&req("q")), Some("r1"));
    }

    #[test]
    fn bad_cassette_line_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(&path, "{\"key\":\"k\",\"response_text\":\"t\",\"recorded_at\":1}\nnot json\n").unwrap();
        assert!(matches!(Cassette::open(&path), Err(ClientError::BadCassette { line: 2, .. })));
    }
}
