use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendConfig, BackendError, ChatRequest, Completion, FinishReason, Message, Usage};

/// Client for endpoints speaking the `POST {base_url}/chat/completions`
/// JSON format.
#[derive(Debug)]
pub struct HttpBackend {
    config: BackendConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(flatten)]
    extra: &'a BTreeMap<String, serde_json::Value>,
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Serializes a request exactly as it goes on the wire.
pub(crate) fn wire_body(req: &ChatRequest) -> Result<Vec<u8>, BackendError> {
    let body = WireRequest {
        model: &req.model,
        messages: &req.messages,
        max_tokens: req.max_tokens,
        temperature: req.temperature,
        seed: req.seed,
        extra: &req.extra,
    };
    serde_json::to_vec(&body).map_err(|e| BackendError::InvalidRequest(e.to_string()))
}

pub(crate) fn parse_wire_response(body: &str) -> Result<Completion, BackendError> {
    let resp: WireResponse =
        serde_json::from_str(body).map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::InvalidResponse("no choices in response".into()))?;
    Ok(Completion {
        text: choice.message.content.unwrap_or_default(),
        finish_reason: FinishReason::from_wire(choice.finish_reason.as_deref()),
        usage: resp.usage.map(|u| Usage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
        }),
    })
}

enum Attempt {
    Done(Completion),
    Retry { rate_limited: bool, message: String },
    Fatal(BackendError),
}

impl HttpBackend {
    /// Reads the API key from the configured environment variable.
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        let api_key = match &config.api_key_env_var {
            Some(var) => Some(
                std::env::var(var).map_err(|_| BackendError::MissingApiKey(var.clone()))?,
            ),
            None => None,
        };
        Self::with_api_key(config, api_key)
    }

    pub fn with_api_key(config: BackendConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        config.validate()?;
        let agent = ureq::Agent::new_with_config(
            ureq::Agent::config_builder()
                .http_status_as_error(false)
                .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
                .build(),
        );
        Ok(Self {
            config,
            api_key,
            agent,
        })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, url: &str, body: &[u8]) -> Attempt {
        let mut request = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = match request.send(body) {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry {
                    rate_limited: false,
                    message: e.to_string(),
                }
            }
        };
        let status = response.status().as_u16();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => {
                return Attempt::Retry {
                    rate_limited: false,
                    message: format!("reading body: {e}"),
                }
            }
        };
        match status {
            200..=299 => match parse_wire_response(&text) {
                Ok(c) => Attempt::Done(c),
                Err(e) => Attempt::Fatal(e),
            },
            401 | 403 => Attempt::Fatal(BackendError::Auth {
                status,
                message: snippet(&text),
            }),
            429 => Attempt::Retry {
                rate_limited: true,
                message: snippet(&text),
            },
            408 | 500..=599 => Attempt::Retry {
                rate_limited: false,
                message: format!("HTTP {status}: {}", snippet(&text)),
            },
            _ => Attempt::Fatal(BackendError::Http {
                status,
                message: snippet(&text),
            }),
        }
    }
}

fn snippet(text: &str) -> String {
    text.chars().take(300).collect()
}

impl Backend for HttpBackend {
    fn complete(&self, req: &ChatRequest) -> Result<Completion, BackendError> {
        req.validate()?;
        let url = self.endpoint();
        let body = wire_body(req)?;
        let policy = &self.config.retry;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&url, &body) {
                Attempt::Done(c) => return Ok(c),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry {
                    rate_limited,
                    message,
                } => {
                    if attempts >= policy.max_attempts {
                        return Err(if rate_limited {
                            BackendError::RateLimited { attempts }
                        } else {
                            BackendError::Transport { attempts, message }
                        });
                    }
                    let delay = policy.delay_before_retry(attempts);
                    tracing::debug!(attempts, ?delay, %message, "retrying chat request");
                    std::thread::sleep(delay);
                }
            }
        }
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight
    }
}
