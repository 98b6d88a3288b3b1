use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::Serialize;
use serde_json::Value;

use super::{BackendError, ChatBackend, CompletionParams};
use crate::prompt::ChatMessage;

pub const API_KEY_ENV: &str = "CONVO_REWRITE_API_KEY";
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Exponential backoff with multiplicative jitter in [0.5, 1.5).
    fn delay(&self, attempt: u32) -> Duration {
        let exp = self.base_delay.saturating_mul(1 << attempt.saturating_sub(1).min(16));
        exp.mul_f64(rand::rng().random_range(0.5..1.5))
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub endpoint: String,
    pub api_key: String,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl HttpConfig {
    /// Reads the API key from `CONVO_REWRITE_API_KEY`.
    pub fn from_env(endpoint: impl Into<String>) -> Result<Self, BackendError> {
        let api_key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or(BackendError::MissingApiKey(API_KEY_ENV))?;
        Ok(Self {
            endpoint: endpoint.into(),
            api_key,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        })
    }
}

struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("limiter lock");
        while *n == 0 {
            n = self.freed.wait(n).expect("limiter lock");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("limiter lock") += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    temperature: f64,
    max_tokens: u32,
    messages: &'a [ChatMessage],
}

/// OpenAI-compatible chat-completions client with retries and an in-flight cap.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    config: HttpConfig,
    limiter: Limiter,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            limiter: Limiter::new(config.max_in_flight),
            client,
            config,
        })
    }

    fn attempt(&self, body: &WireRequest<'_>, timeout: Duration) -> Result<String, BackendError> {
        let response = self
            .client
            .post(&self.config.endpoint)
            .bearer_auth(&self.config.api_key)
            .timeout(timeout)
            .json(body)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        extract_content(&text)
    }
}

/// Reads `choices[0].message.content` from a chat-completions response.
pub(crate) fn extract_content(body: &str) -> Result<String, BackendError> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| BackendError::MalformedBody(e.to_string()))?;
    let content = value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::MalformedBody("missing choices[0].message.content".into()))?;
    if content.trim().is_empty() {
        return Err(BackendError::MalformedBody("empty message content".into()));
    }
    Ok(content.to_string())
}

impl ChatBackend for HttpBackend {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<String, BackendError> {
        params.validate()?;
        let body = WireRequest {
            model: &params.model_name,
            temperature: params.temperature,
            max_tokens: params.max_output_tokens,
            messages,
        };
        let _permit = self.limiter.acquire();
        let attempts = self.config.retry.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match self.attempt(&body, params.timeout) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    let delay = self.config.retry.delay(attempt);
                    log::warn!("attempt {attempt}/{attempts} failed ({e}); retrying in {delay:?}");
                    thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) if e.is_retryable() => {
                    return Err(BackendError::RetriesExhausted {
                        attempts,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_extraction() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"Is it?"}}]}"#;
        assert_eq!(extract_content(ok).unwrap(), "Is it?");
        for bad in ["not json", r#"{"choices":[]}"#, r#"{"choices":[{"message":{"content":"  "}}]}"#] {
            assert!(matches!(extract_content(bad), Err(BackendError::MalformedBody(_))));
        }
    }

    #[test]
    fn backoff_grows() {
        let p = RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(100),
        };
        for attempt in 1..=4 {
            let d = p.delay(attempt);
            let nominal = 100.0 * f64::from(1u32 << (attempt - 1));
            let ms = d.as_secs_f64() * 1000.0;
            assert!(ms >= 0.5 * nominal - 1e-6 && ms < 1.5 * nominal, "{attempt}: {ms}");
        }
    }
}
