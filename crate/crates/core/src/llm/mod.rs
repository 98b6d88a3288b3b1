//! Chat-completion backends.
//!
//! [`ChatBackend`] is the single seam between request composition and the
//! model. Two implementations ship: a remote OpenAI-compatible HTTP client
//! and a deterministic fixture-driven mock. Either can be wrapped in a
//! [`CachedBackend`] that replays responses from disk.

mod cache;
mod http;
mod mock;
mod postprocess;

use std::time::Duration;

use thiserror::Error;

use crate::prompt::ChatMessage;

pub use cache::{complete_cached, CacheKey, CachedBackend, ResponseCache};
pub use http::{HttpBackend, HttpConfig, RetryPolicy, API_KEY_ENV, DEFAULT_ENDPOINT};
pub use mock::{MockBackend, MOCK_ANSWER};
pub use postprocess::{postprocess, PostprocessError, Processed};

pub const DEFAULT_MODEL: &str = "gpt-3.5-turbo";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("environment variable {0} is not set")]
    MissingApiKey(&'static str),
    #[error("invalid completion parameters: {0}")]
    InvalidParams(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response body: {0}")]
    MalformedBody(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: u32,
        #[source]
        last: Box<BackendError>,
    },
}

impl BackendError {
    /// Transport failures, rate limits and server errors are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 429 || (500..600).contains(status),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionParams {
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub timeout: Duration,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self {
            model_name: DEFAULT_MODEL.to_string(),
            temperature: 0.0,
            max_output_tokens: 256,
            timeout: Duration::from_secs(60),
        }
    }
}

impl CompletionParams {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidParams(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_output_tokens < 16 {
            return Err(BackendError::InvalidParams(format!(
                "max_output_tokens {} below 16",
                self.max_output_tokens
            )));
        }
        if self.model_name.trim().is_empty() {
            return Err(BackendError::InvalidParams("empty model name".into()));
        }
        Ok(())
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<String, BackendError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<String, BackendError> {
        (**self).complete(messages, params)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<String, BackendError> {
        (**self).complete(messages, params)
    }
}
