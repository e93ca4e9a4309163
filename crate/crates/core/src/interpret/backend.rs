//! Request/response backends for captioning, chat completion and phrase
//! embedding.
//!
//! Every backend speaks one JSON request and receives one JSON response over a
//! [`Transport`]. Transports are interchangeable: an HTTP endpoint, a local
//! process reading the request on stdin, or an in-process mock. The clients on
//! top only deal with the JSON shapes.

use std::io::Write;
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::mock::{MockChatServer, MockEmbedServer, MockVisionServer};
use super::InterpretError;

/// Phrase-embedding width expected from the embedding backend.
pub const PHRASE_DIM: usize = 768;

/// Moves one serialized request to a backend and returns the raw reply.
pub trait Transport: Send + Sync {
    fn exchange(&self, request: &[u8]) -> Result<Vec<u8>, InterpretError>;
}

/// POSTs the request body as JSON to a fixed URL.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    bearer: Option<String>,
}

impl HttpTransport {
    pub fn new(url: &str, bearer: Option<String>, timeout: Duration) -> Result<Self, InterpretError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| InterpretError::Transport(e.to_string()))?;
        Ok(Self { client, url: url.to_string(), bearer })
    }
}

impl Transport for HttpTransport {
    fn exchange(&self, request: &[u8]) -> Result<Vec<u8>, InterpretError> {
        let mut req = self
            .client
            .post(&self.url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(request.to_vec());
        if let Some(token) = &self.bearer {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| InterpretError::Transport(format!("{}: {e}", self.url)))?;
        let status = resp.status();
        let body = resp.bytes().map_err(|e| InterpretError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(InterpretError::Transport(format!(
                "{} returned {status}: {}",
                self.url,
                String::from_utf8_lossy(&body).chars().take(200).collect::<String>()
            )));
        }
        Ok(body.to_vec())
    }
}

/// Runs a local program per request: request on stdin, reply on stdout.
pub struct CommandTransport {
    program: String,
    args: Vec<String>,
}

impl CommandTransport {
    pub fn new(argv: &[String]) -> Result<Self, InterpretError> {
        let (program, args) =
            argv.split_first().ok_or_else(|| InterpretError::Config("command backend needs a program".into()))?;
        Ok(Self { program: program.clone(), args: args.to_vec() })
    }
}

impl Transport for CommandTransport {
    fn exchange(&self, request: &[u8]) -> Result<Vec<u8>, InterpretError> {
        let fail = |m: String| InterpretError::Transport(format!("{}: {m}", self.program));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        if let Some(mut stdin) = child.stdin.take() {
            stdin.write_all(request).map_err(|e| fail(e.to_string()))?;
        }
        let out = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(format!("{}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim())));
        }
        Ok(out.stdout)
    }
}

/// Adapts a closure into a transport. Handy for tests and scripted replies.
pub struct FnTransport<F>(pub F);

impl<F> Transport for FnTransport<F>
where
    F: Fn(&[u8]) -> Result<Vec<u8>, InterpretError> + Send + Sync,
{
    fn exchange(&self, request: &[u8]) -> Result<Vec<u8>, InterpretError> {
        (self.0)(request)
    }
}

/// Wraps another transport and keeps a copy of every outgoing request.
pub struct RecordingTransport {
    inner: Arc<dyn Transport>,
    log: Mutex<Vec<Vec<u8>>>,
}

impl RecordingTransport {
    pub fn new(inner: Arc<dyn Transport>) -> Self {
        Self { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn requests(&self) -> Vec<Vec<u8>> {
        self.log.lock().map(|l| l.clone()).unwrap_or_default()
    }
}

impl Transport for RecordingTransport {
    fn exchange(&self, request: &[u8]) -> Result<Vec<u8>, InterpretError> {
        if let Ok(mut l) = self.log.lock() {
            l.push(request.to_vec());
        }
        self.inner.exchange(request)
    }
}

/// Attempt count and exponential backoff for transport failures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    /// Total attempts including the first one.
    pub attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, backoff_ms: 250 }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { attempts: 1, backoff_ms: 0 }
    }

    /// Calls `f` until it succeeds or the attempts run out; returns the last
    /// error in that case.
    pub fn run<T>(&self, what: &str, mut f: impl FnMut() -> Result<T, InterpretError>) -> Result<T, InterpretError> {
        let attempts = self.attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match f() {
                Ok(v) => return Ok(v),
                Err(e) if attempt >= attempts => return Err(e),
                Err(e) => {
                    log::warn!("{what}: attempt {attempt}/{attempts} failed: {e}");
                    let wait = self.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                    if wait > 0 {
                        std::thread::sleep(Duration::from_millis(wait));
                    }
                }
            }
        }
    }
}

fn exchange_json<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
    transport: &dyn Transport,
    request: &Req,
) -> Result<Resp, InterpretError> {
    let body = serde_json::to_vec(request).map_err(|e| InterpretError::Protocol(e.to_string()))?;
    let reply = transport.exchange(&body)?;
    serde_json::from_slice(&reply).map_err(|e| {
        InterpretError::Protocol(format!(
            "{e} in reply {:?}",
            String::from_utf8_lossy(&reply).chars().take(200).collect::<String>()
        ))
    })
}

/// Wire format of a captioning request. `prompt` is `null` for unconditional
/// captioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub model: String,
    pub prompt: Option<String>,
    pub image_png_base64: String,
}

/// Wire format of a chat-completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: usize,
}

/// Reply to captioning and chat requests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextReply {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub model: String,
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedReply {
    pub embeddings: Vec<Vec<f64>>,
}

/// Image-captioning client.
pub struct CaptionClient {
    transport: Arc<dyn Transport>,
    pub model: String,
    pub retry: RetryPolicy,
}

impl CaptionClient {
    pub fn new(transport: Arc<dyn Transport>, model: &str, retry: RetryPolicy) -> Self {
        Self { transport, model: model.to_string(), retry }
    }

    /// Captions a PNG-encoded image, optionally continuing `prompt`.
    pub fn caption(&self, png: &[u8], prompt: Option<&str>) -> Result<String, InterpretError> {
        let req = CaptionRequest {
            model: self.model.clone(),
            prompt: prompt.map(str::to_string),
            image_png_base64: base64::engine::general_purpose::STANDARD.encode(png),
        };
        self.retry.run("caption", || exchange_json::<_, TextReply>(self.transport.as_ref(), &req).map(|r| r.text))
    }
}

/// Chat-completion client.
pub struct ChatClient {
    transport: Arc<dyn Transport>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: usize,
    pub retry: RetryPolicy,
}

impl ChatClient {
    pub fn new(
        transport: Arc<dyn Transport>,
        model: &str,
        temperature: f64,
        max_tokens: usize,
        retry: RetryPolicy,
    ) -> Result<Self, InterpretError> {
        if !(0.0..=1.0).contains(&temperature) {
            return Err(InterpretError::Config(format!("temperature {temperature} outside [0, 1]")));
        }
        Ok(Self { transport, model: model.to_string(), temperature, max_tokens, retry })
    }

    pub fn complete(&self, prompt: &str) -> Result<String, InterpretError> {
        let req = ChatRequest {
            model: self.model.clone(),
            prompt: prompt.to_string(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        };
        self.retry.run("chat", || exchange_json::<_, TextReply>(self.transport.as_ref(), &req).map(|r| r.text))
    }
}

/// Phrase-embedding client.
pub struct EmbedClient {
    transport: Arc<dyn Transport>,
    pub model: String,
    pub retry: RetryPolicy,
    pub dim: usize,
}

impl EmbedClient {
    pub fn new(transport: Arc<dyn Transport>, model: &str, retry: RetryPolicy) -> Self {
        Self { transport, model: model.to_string(), retry, dim: PHRASE_DIM }
    }

    /// One vector per input, in input order. Replies with the wrong count,
    /// width or non-finite values are protocol errors.
    pub fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f64>>, InterpretError> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let req = EmbedRequest { model: self.model.clone(), inputs: inputs.to_vec() };
        self.retry.run("embed", || {
            let reply: EmbedReply = exchange_json(self.transport.as_ref(), &req)?;
            if reply.embeddings.len() != inputs.len() {
                return Err(InterpretError::Protocol(format!(
                    "{} embeddings for {} inputs",
                    reply.embeddings.len(),
                    inputs.len()
                )));
            }
            for v in &reply.embeddings {
                if v.len() != self.dim || v.iter().any(|x| !x.is_finite()) {
                    return Err(InterpretError::Protocol(format!(
                        "embedding of width {} (expected {}) or with non-finite values",
                        v.len(),
                        self.dim
                    )));
                }
            }
            Ok(reply.embeddings)
        })
    }
}

/// Where a backend lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Deterministic in-process stand-in.
    #[default]
    Mock,
    Http,
    Command,
}

/// Which of the three services a backend provides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendRole {
    Vision,
    Chat,
    Embed,
}

/// Configuration of one backend. Credentials are never stored here; the
/// bearer token is read from the environment variable named in
/// `api_key_env`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub command: Vec<String>,
    pub model: String,
    pub api_key_env: Option<String>,
    pub timeout_s: u64,
    pub retry: RetryPolicy,
    /// Sampling temperature for chat backends, in `[0, 1]`.
    pub temperature: f64,
    pub max_tokens: usize,
    /// Concurrent requests for batchable work.
    pub max_in_flight: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            command: Vec::new(),
            model: "mock".into(),
            api_key_env: None,
            timeout_s: 120,
            retry: RetryPolicy::default(),
            temperature: 0.9,
            max_tokens: 512,
            max_in_flight: 4,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), InterpretError> {
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(InterpretError::Config(format!("temperature {} outside [0, 1]", self.temperature)));
        }
        match self.kind {
            BackendKind::Http if self.endpoint.is_none() => {
                Err(InterpretError::Config("http backend needs an endpoint".into()))
            }
            BackendKind::Command if self.command.is_empty() => {
                Err(InterpretError::Config("command backend needs a command".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn transport(&self, role: BackendRole) -> Result<Arc<dyn Transport>, InterpretError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Mock => match role {
                BackendRole::Vision => Arc::new(MockVisionServer),
                BackendRole::Chat => Arc::new(MockChatServer),
                BackendRole::Embed => Arc::new(MockEmbedServer::default()),
            },
            BackendKind::Http => {
                let bearer = match &self.api_key_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        InterpretError::Config(format!("environment variable {var} is not set"))
                    })?),
                    None => None,
                };
                let url = self.endpoint.as_deref().unwrap_or_default();
                Arc::new(HttpTransport::new(url, bearer, Duration::from_secs(self.timeout_s.max(1)))?)
            }
            BackendKind::Command => Arc::new(CommandTransport::new(&self.command)?),
        })
    }

    pub fn caption_client(&self) -> Result<CaptionClient, InterpretError> {
        Ok(CaptionClient::new(self.transport(BackendRole::Vision)?, &self.model, self.retry))
    }

    pub fn chat_client(&self) -> Result<ChatClient, InterpretError> {
        ChatClient::new(self.transport(BackendRole::Chat)?, &self.model, self.temperature, self.max_tokens, self.retry)
    }

    pub fn embed_client(&self) -> Result<EmbedClient, InterpretError> {
        Ok(EmbedClient::new(self.transport(BackendRole::Embed)?, &self.model, self.retry))
    }
}
