//! JSON-over-HTTP plumbing shared by the remote embedding, scoring and
//! completion clients: retry with exponential backoff and jitter, bearer
//! auth from an environment variable, and a per-minute rate limiter.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum HttpError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("environment variable `{0}` is not set")]
    MissingCredential(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Minimal POST-JSON transport so clients can be exercised without a network.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, body: &Value, headers: &[(String, String)]) -> Result<HttpResponse, HttpError>;
}

/// Blocking reqwest transport.
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self, HttpError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| HttpError::Transport(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for ReqwestTransport {
    fn post_json(&self, url: &str, body: &Value, headers: &[(String, String)]) -> Result<HttpResponse, HttpError> {
        let mut req = self.client.post(url).json(body);
        for (k, v) in headers {
            req = req.header(k, v);
        }
        let resp = req.send().map_err(|e| HttpError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| HttpError::Transport(e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Full-jitter delay before retry number `attempt` (1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = self.base_delay.saturating_mul(1u32 << attempt.saturating_sub(1).min(16));
        let cap = exp.min(self.max_delay);
        let frac: f64 = rand::rng().random_range(0.5..=1.0);
        cap.mul_f64(frac)
    }
}

fn retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

/// Outcome of a successful call: parsed body and how many attempts it took.
#[derive(Debug, Clone)]
pub struct CallOutcome {
    pub body: Value,
    pub attempts: u32,
}

/// A configured JSON endpoint.
pub struct JsonClient {
    transport: Box<dyn Transport>,
    url: String,
    retry: RetryPolicy,
    auth_env_var: Option<String>,
}

impl JsonClient {
    pub fn new(transport: Box<dyn Transport>, url: impl Into<String>, retry: RetryPolicy, auth_env_var: Option<String>) -> Self {
        Self {
            transport,
            url: url.into(),
            retry,
            auth_env_var,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn headers(&self, extra: &[(String, String)]) -> Result<Vec<(String, String)>, HttpError> {
        let mut headers = extra.to_vec();
        if let Some(var) = &self.auth_env_var {
            let token = std::env::var(var).map_err(|_| HttpError::MissingCredential(var.clone()))?;
            headers.push(("Authorization".into(), format!("Bearer {token}")));
        }
        Ok(headers)
    }

    /// POSTs `body`, retrying on 429, 5xx and transport failures.
    pub fn call(&self, body: &Value, extra_headers: &[(String, String)]) -> Result<CallOutcome, HttpError> {
        let headers = self.headers(extra_headers)?;
        let mut last = String::new();
        for attempt in 1..=self.retry.max_attempts.max(1) {
            match self.transport.post_json(&self.url, body, &headers) {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    if attempt > 1 {
                        log::info!("{} succeeded after {} retries", self.url, attempt - 1);
                    }
                    let body = serde_json::from_str(&resp.body).map_err(|e| HttpError::Malformed(e.to_string()))?;
                    return Ok(CallOutcome { body, attempts: attempt });
                }
                Ok(resp) if retryable(resp.status) => {
                    last = format!("HTTP {}", resp.status);
                }
                Ok(resp) => {
                    return Err(HttpError::Status {
                        status: resp.status,
                        body: resp.body,
                    })
                }
                Err(HttpError::Transport(msg)) => last = msg,
                Err(e) => return Err(e),
            }
            if attempt < self.retry.max_attempts {
                let delay = self.retry.delay(attempt);
                log::warn!("{}: {last}; retry {attempt} in {delay:?}", self.url);
                std::thread::sleep(delay);
            }
        }
        Err(HttpError::Exhausted {
            attempts: self.retry.max_attempts,
            last,
        })
    }
}

/// Spaces requests so that at most `per_minute` start in any minute.
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn per_minute(per_minute: u32) -> Self {
        let interval = if per_minute == 0 {
            Duration::ZERO
        } else {
            Duration::from_secs(60) / per_minute
        };
        Self {
            interval,
            next: Mutex::new(None),
        }
    }

    /// Blocks until the caller may start a request.
    pub fn acquire(&self) {
        if self.interval.is_zero() {
            return;
        }
        let wait = {
            let mut next = self.next.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot.saturating_duration_since(now)
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}
