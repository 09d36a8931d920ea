//! Chat completion backends.
//!
//! Every model is reached through [`Backend::complete`]. Two implementations
//! exist: [`HttpBackend`] speaks the common `/chat/completions` JSON format,
//! [`ScriptedBackend`] answers from a deterministic script.

mod http;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use scripted::{Rule, ScriptedBackend};

/// Completion cap applied to every model by default.
pub const DEFAULT_MAX_TOKENS: u32 = 32_768;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Provider-specific fields merged verbatim into the request body.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<Message>) -> Self {
        Self {
            model: model.into(),
            messages,
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: None,
            seed: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        Ok(())
    }

    /// Content of the first message with the given role.
    pub fn content(&self, role: Role) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == role)
            .map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    /// The completion hit `max_tokens`; text may be truncated.
    Length,
    Other,
}

impl FinishReason {
    pub fn from_wire(s: Option<&str>) -> Self {
        match s {
            Some("stop") | Some("end_turn") => Self::Stop,
            Some("length") | Some("max_tokens") => Self::Length,
            _ => Self::Other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub finish_reason: FinishReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

impl Completion {
    pub fn stop(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            finish_reason: FinishReason::Stop,
            usage: None,
        }
    }

    pub fn is_truncated(&self) -> bool {
        self.finish_reason == FinishReason::Length
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("authentication rejected (HTTP {status}): {message}")]
    Auth { status: u16, message: String },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("endpoint returned HTTP {status}: {message}")]
    Http { status: u16, message: String },
    #[error("unparseable response: {0}")]
    InvalidResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("missing API key: environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("scripted backend has no response left")]
    ScriptExhausted,
}

/// Something that turns a chat request into a completion.
///
/// Implementations must be callable from several threads at once.
pub trait Backend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, BackendError>;

    /// Upper bound on concurrent requests callers should issue.
    fn max_in_flight(&self) -> usize {
        1
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, BackendError> {
        (**self).complete(req)
    }

    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before retry k (1-based) is `backoff_ms[min(k-1, len-1)]`.
    pub backoff_ms: Vec<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            backoff_ms: vec![1_000, 2_000, 4_000, 8_000, 16_000],
        }
    }
}

impl RetryPolicy {
    pub fn delay_before_retry(&self, retry: u32) -> Duration {
        if self.backoff_ms.is_empty() || retry == 0 {
            return Duration::ZERO;
        }
        let idx = (retry as usize - 1).min(self.backoff_ms.len() - 1);
        Duration::from_millis(self.backoff_ms[idx])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub base_url: String,
    /// Name of the environment variable holding the bearer token. No
    /// Authorization header is sent when unset.
    pub api_key_env_var: Option<String>,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            api_key_env_var: None,
            timeout_secs: 600,
            retry: RetryPolicy::default(),
            max_in_flight: 4,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.retry.max_attempts == 0 {
            return Err(BackendError::InvalidRequest("retry.max_attempts must be >= 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(BackendError::InvalidRequest("max_in_flight must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-model request parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RequestParams {
    pub max_tokens: u32,
    pub temperature: Option<f64>,
    /// Forward run seeds to the endpoint. Endpoints without seed support
    /// should set this to false.
    pub send_seed: bool,
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Default for RequestParams {
    fn default() -> Self {
        Self {
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: None,
            send_seed: true,
            extra: BTreeMap::new(),
        }
    }
}

/// A named model behind a backend.
#[derive(Clone)]
pub struct ModelClient {
    pub model: String,
    pub params: RequestParams,
    backend: Arc<dyn Backend>,
}

impl fmt::Debug for ModelClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelClient")
            .field("model", &self.model)
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

impl ModelClient {
    pub fn new(model: impl Into<String>, backend: Arc<dyn Backend>) -> Self {
        Self {
            model: model.into(),
            params: RequestParams::default(),
            backend,
        }
    }

    pub fn with_params(mut self, params: RequestParams) -> Self {
        self.params = params;
        self
    }

    pub fn request(&self, messages: Vec<Message>, seed: Option<u64>) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages,
            max_tokens: self.params.max_tokens,
            temperature: self.params.temperature,
            seed: seed.filter(|_| self.params.send_seed),
            extra: self.params.extra.clone(),
        }
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<Completion, BackendError> {
        req.validate()?;
        let completion = self.backend.complete(req)?;
        if completion.is_truncated() {
            tracing::warn!(
                model = %self.model,
                max_tokens = req.max_tokens,
                "completion stopped at the token cap; output may be truncated"
            );
        }
        Ok(completion)
    }

    pub fn max_in_flight(&self) -> usize {
        self.backend.max_in_flight().max(1)
    }
}
