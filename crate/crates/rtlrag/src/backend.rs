//! Generation backends: an HTTP completion client plus deterministic mocks.
//!
//! The mocks are first-class, not test scaffolding: EchoTarget turns the
//! whole pipeline into an identity check (EM/ES must hit 100), FixedString
//! pins outputs for harness tests, CopyLastLine is a trivially cheap
//! baseline that repeats the last line of the current file.

use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::corpus::RepoSample;
use crate::semaphore::Semaphore;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("generation service error (status {status}): {body}")]
    Http { status: u16, body: String },
    #[error("generation request timed out: {0}")]
    Timeout(String),
    #[error("generation transport error: {0}")]
    Transport(String),
    #[error("malformed generation response: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireFormat {
    /// `{"model", "prompt", "temperature", "max_tokens", "stop"}` →
    /// `{"choices": [{"text"}]}`.
    Completion,
    /// Same fields but the prompt rides in a one-turn `messages` array →
    /// `{"choices": [{"message": {"content"}}]}`.
    Chat,
}

impl std::str::FromStr for WireFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "completion" => Ok(WireFormat::Completion),
            "chat" => Ok(WireFormat::Chat),
            other => Err(format!(
                "unknown wire format `{other}` (expected completion or chat)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpGenerator {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: usize,
    pub stop: Vec<String>,
    pub wire: WireFormat,
    pub retries: usize,
    pub backoff: Duration,
    client: reqwest::blocking::Client,
    permits: Arc<Semaphore>,
}

impl HttpGenerator {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        wire: WireFormat,
        timeout: Duration,
        max_in_flight: usize,
    ) -> HttpGenerator {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("default TLS backend is always available");
        HttpGenerator {
            endpoint: endpoint.into(),
            model: model.into(),
            temperature: 0.2,
            max_tokens: 64,
            stop: vec!["\n".to_string()],
            wire,
            retries: 2,
            backoff: Duration::from_millis(200),
            client,
            permits: Arc::new(Semaphore::new(max_in_flight.max(1))),
        }
    }

    pub fn with_sampling(mut self, temperature: f64, max_tokens: usize) -> Self {
        assert!(temperature >= 0.0, "temperature must be non-negative");
        assert!(max_tokens >= 1, "max_tokens must be at least 1");
        self.temperature = temperature;
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_retries(mut self, retries: usize, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }

    fn request_body(&self, prompt: &str) -> serde_json::Value {
        match self.wire {
            WireFormat::Completion => serde_json::json!({
                "model": self.model,
                "prompt": prompt,
                "temperature": self.temperature,
                "max_tokens": self.max_tokens,
                "stop": self.stop,
            }),
            WireFormat::Chat => serde_json::json!({
                "model": self.model,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": self.temperature,
                "max_tokens": self.max_tokens,
                "stop": self.stop,
            }),
        }
    }

    fn generate_once(&self, prompt: &str) -> Result<String, BackendError> {
        let _permit = self.permits.acquire();
        let response = self
            .client
            .post(&self.endpoint)
            .json(&self.request_body(prompt))
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    BackendError::Timeout(format!("{}: {e}", self.endpoint))
                } else {
                    BackendError::Transport(format!("{}: {e}", self.endpoint))
                }
            })?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            let body = response.text().unwrap_or_default();
            return Err(BackendError::Http {
                status,
                body: excerpt(&body),
            });
        }

        #[derive(Deserialize)]
        struct Message {
            content: String,
        }
        #[derive(Deserialize)]
        struct Choice {
            text: Option<String>,
            message: Option<Message>,
        }
        #[derive(Deserialize)]
        struct Body {
            choices: Vec<Choice>,
        }
        let body: Body = response
            .json()
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
        let first = body
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Malformed("empty choices array".to_string()))?;
        match self.wire {
            WireFormat::Completion => first
                .text
                .ok_or_else(|| BackendError::Malformed("choice missing `text`".to_string())),
            WireFormat::Chat => first
                .message
                .map(|m| m.content)
                .ok_or_else(|| BackendError::Malformed("choice missing `message`".to_string())),
        }
    }

    fn generate(&self, prompt: &str) -> Result<String, BackendError> {
        let mut attempt = 0;
        loop {
            match self.generate_once(prompt) {
                Ok(text) => return Ok(text),
                Err(e) if attempt < self.retries && is_retryable(&e) => {
                    std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt as u32));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn is_retryable(err: &BackendError) -> bool {
    match err {
        BackendError::Timeout(_) | BackendError::Transport(_) => true,
        BackendError::Http { status, .. } => *status == 429 || *status >= 500,
        BackendError::Malformed(_) => false,
    }
}

fn excerpt(s: &str) -> String {
    const MAX: usize = 300;
    if s.len() <= MAX {
        s.to_string()
    } else {
        let mut end = MAX;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &s[..end])
    }
}

#[derive(Debug, Clone)]
pub enum GenerationBackend {
    Http(HttpGenerator),
    /// Returns the sample's target verbatim: the end-to-end identity oracle.
    EchoTarget,
    /// Always returns the same string.
    FixedString(String),
    /// Repeats the last non-empty line of the prompt's current-file section.
    CopyLastLine,
}

impl GenerationBackend {
    /// Short name recorded in reports.
    pub fn name(&self) -> String {
        match self {
            GenerationBackend::Http(h) => format!("http:{}", h.model),
            GenerationBackend::EchoTarget => "echo-target".to_string(),
            GenerationBackend::FixedString(_) => "fixed".to_string(),
            GenerationBackend::CopyLastLine => "copy-last-line".to_string(),
        }
    }

    pub fn generate(&self, prompt: &str, sample: &RepoSample) -> Result<String, BackendError> {
        match self {
            GenerationBackend::Http(h) => h.generate(prompt),
            GenerationBackend::EchoTarget => Ok(sample.target.clone()),
            GenerationBackend::FixedString(s) => Ok(s.clone()),
            GenerationBackend::CopyLastLine => Ok(copy_last_line(prompt)),
        }
    }
}

/// Everything after the last `// Current file:` header line; the whole
/// prompt when no header is present.
fn file_section(prompt: &str) -> &str {
    const MARKER: &str = "// Current file: ";
    let mut section = prompt;
    let mut search_end = prompt.len();
    while let Some(pos) = prompt[..search_end].rfind(MARKER) {
        if pos == 0 || prompt.as_bytes()[pos - 1] == b'\n' {
            let after_marker = &prompt[pos..];
            section = match after_marker.find('\n') {
                Some(nl) => &after_marker[nl + 1..],
                None => "",
            };
            break;
        }
        search_end = pos;
    }
    section
}

fn copy_last_line(prompt: &str) -> String {
    file_section(prompt)
        .lines()
        .rev()
        .find(|line| !line.trim().is_empty())
        .unwrap_or("")
        .to_string()
}
