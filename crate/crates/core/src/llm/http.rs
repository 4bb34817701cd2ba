//! JSON-over-HTTP chat completion with retry and full-jitter backoff.

use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde_json::{json, Value};

use super::{Completion, CompletionRequest, CompletionResponse, LlmError, Provider, Usage};

pub const API_KEY_ENV: &str = "TEXTALIGN_API_KEY";

#[derive(Clone, Debug, PartialEq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TransportError {
    Timeout,
    Other(String),
}

/// One POST of a JSON body. Implementations must not retry.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, api_key: &str, body: &Value, timeout: Duration)
        -> Result<HttpReply, TransportError>;
}

#[derive(Clone, Debug, Default)]
pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        api_key: &str,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        let mut response =
            agent.post(url).header("Authorization", &format!("Bearer {api_key}")).send_json(body).map_err(
                |e| match e {
                    ureq::Error::Timeout(_) => TransportError::Timeout,
                    other => TransportError::Other(other.to_string()),
                },
            )?;
        let status = response.status().as_u16();
        let body = response.body_mut().read_to_string().map_err(|e| TransportError::Other(e.to_string()))?;
        Ok(HttpReply { status, body })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 4, base_delay: Duration::from_secs(1), factor: 2.0 }
    }
}

impl RetryPolicy {
    /// Upper bound of the full-jitter window before retry number `retry` (0-based).
    pub fn window(&self, retry: u32) -> Duration {
        self.base_delay.mul_f64(self.factor.powi(retry as i32))
    }

    pub fn delay(&self, retry: u32, rng: &mut impl Rng) -> Duration {
        self.window(retry).mul_f64(rng.random::<f64>())
    }
}

fn retryable_status(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

pub struct HttpProvider {
    endpoint: String,
    api_key: Option<String>,
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
    timeout: Duration,
    sleep: Sleeper,
}

impl HttpProvider {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key,
            transport: Arc::new(UreqTransport),
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
            sleep: Arc::new(std::thread::sleep),
        }
    }

    /// Reads the credential from `TEXTALIGN_API_KEY`.
    pub fn from_env(endpoint: impl Into<String>) -> Self {
        Self::new(endpoint, std::env::var(API_KEY_ENV).ok())
    }

    pub fn with_transport(mut self, transport: Arc<dyn Transport>) -> Self {
        self.transport = transport;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Arc::new(sleep);
        self
    }

    pub fn wire_body(request: &CompletionRequest) -> Value {
        json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        })
    }

    pub fn parse_reply(body: &str) -> Result<CompletionResponse, LlmError> {
        let malformed = || LlmError::ProviderError { status: None, body: body.to_string() };
        let value: Value = serde_json::from_str(body).map_err(|_| malformed())?;
        let choice = value.get("choices").and_then(|c| c.get(0)).ok_or_else(malformed)?;
        let content =
            choice.get("message").and_then(|m| m.get("content")).and_then(Value::as_str).ok_or_else(malformed)?;
        let finish_reason = choice.get("finish_reason").and_then(Value::as_str).unwrap_or("").to_string();
        let usage = value.get("usage").and_then(|u| {
            Some(Usage {
                prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
                completion_tokens: u.get("completion_tokens")?.as_u64()?,
            })
        });
        Ok(CompletionResponse { content: content.to_string(), finish_reason, usage })
    }
}

impl Provider for HttpProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LlmError> {
        request.validate()?;
        let api_key = self.api_key.as_deref().filter(|k| !k.is_empty()).ok_or(LlmError::AuthMissing)?;
        let body = Self::wire_body(request);
        let mut rng = rand::rng();
        let mut last_error = LlmError::Timeout;
        for attempt in 1..=self.retry.max_attempts.max(1) {
            if attempt > 1 {
                (self.sleep)(self.retry.delay(attempt - 2, &mut rng));
            }
            match self.transport.post_json(&self.endpoint, api_key, &body, self.timeout) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    return Ok(Completion { response: Self::parse_reply(&reply.body)?, attempts: attempt });
                }
                Ok(reply) => {
                    let err = LlmError::ProviderError { status: Some(reply.status), body: reply.body };
                    if !retryable_status(reply.status) {
                        return Err(err);
                    }
                    last_error = err;
                }
                Err(TransportError::Timeout) => last_error = LlmError::Timeout,
                Err(TransportError::Other(detail)) => {
                    last_error = LlmError::ProviderError { status: None, body: detail }
                }
            }
        }
        Err(last_error)
    }
}
