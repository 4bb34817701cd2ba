//! Provider-agnostic chat completion with a deterministic offline mock,
//! retrying HTTP transport and a content-addressed response cache.

mod cache;
mod http;
mod mock;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheEntry, CachedClient, Exchange};
pub use http::{HttpProvider, HttpReply, RetryPolicy, Transport, TransportError, UreqTransport, API_KEY_ENV};
pub use mock::{MockProvider, CAPTION_TAG, REASON_TAG, SUMMARIZE_TAG};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("provider error (status {status:?}): {body}")]
    ProviderError { status: Option<u16>, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("no API credential configured (set {API_KEY_ENV})")]
    AuthMissing,
    #[error("system message carries no known routing tag")]
    UnknownTag,
    #[error("unknown provider `{0}`")]
    UnknownProvider(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("corrupt cache entry {0}")]
    CacheCorrupt(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// Field order here is the canonical serialization order used for cache keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub provider_id: String,
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), LlmError> {
        match self.messages.first() {
            None => Err(LlmError::InvalidRequest("messages must be non-empty".into())),
            Some(m) if m.role == Role::Assistant => {
                Err(LlmError::InvalidRequest("first message must be system or user".into()))
            }
            _ if !(self.temperature >= 0.0 && self.temperature.is_finite()) => {
                Err(LlmError::InvalidRequest("temperature must be a finite non-negative number".into()))
            }
            _ if self.max_tokens == 0 => Err(LlmError::InvalidRequest("max_tokens must be positive".into())),
            _ => Ok(()),
        }
    }

    /// Compact JSON with fixed field order; byte-stable across runs.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }

    pub fn cache_key(&self) -> CacheKey {
        CacheKey(hex::encode(Sha256::digest(self.canonical_json().as_bytes())))
    }

    pub fn system_message(&self) -> Option<&str> {
        self.messages.iter().find(|m| m.role == Role::System).map(|m| m.content.as_str())
    }

    pub fn last_user_message(&self) -> Option<&str> {
        self.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str())
    }
}

/// Hex SHA-256 of the canonical request.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(pub String);

impl CacheKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub content: String,
    pub finish_reason: String,
    pub usage: Option<Usage>,
}

/// A provider response plus the number of upstream attempts it took.
#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub response: CompletionResponse,
    pub attempts: u32,
}

/// Provider and sampling settings shared by every request of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderProfile {
    pub provider_id: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_max_tokens() -> u32 {
    512
}

impl ProviderProfile {
    pub fn mock() -> Self {
        Self { provider_id: "mock".into(), model: "mock".into(), temperature: 0.0, max_tokens: default_max_tokens() }
    }

    pub fn request(&self, messages: Vec<Message>) -> CompletionRequest {
        CompletionRequest {
            provider_id: self.provider_id.clone(),
            model: self.model.clone(),
            messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }
}

pub trait Provider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, LlmError>;

    /// False for providers that never touch the network.
    fn is_live(&self) -> bool {
        true
    }
}
