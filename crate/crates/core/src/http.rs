//! Blocking JSON-over-HTTP client with bounded retries.

use std::time::Duration;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    /// Exponential backoff with up to 50% additive jitter.
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = self.base_delay.saturating_mul(1u32 << attempt.min(16));
        let capped = exp.min(self.max_delay);
        let jitter = rand::rng().random_range(0.0..0.5);
        capped.mul_f64(1.0 + jitter)
    }
}

#[derive(Debug, Clone)]
pub struct HttpClient {
    agent: ureq::Agent,
    retry: RetryPolicy,
}

enum Attempt {
    Retry(String),
    Fail(String),
}

impl HttpClient {
    pub fn new(timeout: Duration, retry: RetryPolicy) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Self { agent, retry }
    }

    /// POSTs `body` as JSON and decodes the JSON response. Transport errors,
    /// 429 and 5xx responses are retried; other failures return immediately.
    pub fn post_json<B: Serialize, R: DeserializeOwned>(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &B,
    ) -> Result<R> {
        let mut last = String::new();
        for attempt in 0..self.retry.max_attempts.max(1) {
            if attempt > 0 {
                let delay = self.retry.delay(attempt - 1);
                tracing::warn!(url, attempt, ?delay, error = %last, "retrying request");
                std::thread::sleep(delay);
            }
            match self.try_once(url, bearer, body) {
                Ok(text) => {
                    return serde_json::from_str(&text)
                        .map_err(|e| Error::Provider(format!("{url}: undecodable response: {e}")))
                }
                Err(Attempt::Fail(msg)) => return Err(Error::Provider(format!("{url}: {msg}"))),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(Error::Provider(format!(
            "{url}: giving up after {} attempts: {last}",
            self.retry.max_attempts.max(1)
        )))
    }

    fn try_once<B: Serialize>(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &B,
    ) -> std::result::Result<String, Attempt> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = bearer.filter(|k| !k.is_empty()) {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let payload = serde_json::to_vec(body).map_err(|e| Attempt::Fail(e.to_string()))?;
        let resp = req
            .send(&payload[..])
            .map_err(|e| Attempt::Retry(format!("transport: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .into_body()
            .read_to_string()
            .map_err(|e| Attempt::Retry(format!("reading body: {e}")))?;
        match status {
            200..=299 => Ok(text),
            429 | 500..=599 => Err(Attempt::Retry(format!("http {status}"))),
            _ => Err(Attempt::Fail(format!(
                "http {status}: {}",
                text.chars().take(200).collect::<String>()
            ))),
        }
    }
}
