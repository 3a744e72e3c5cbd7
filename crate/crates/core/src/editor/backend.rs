use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::EditorError;
use crate::http::{HttpError, JsonClient, RateLimiter, RetryPolicy, Transport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub stop_sequences: Vec<String>,
}

impl Default for EditParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 1.0,
            max_tokens: 256,
            stop_sequences: vec!["\n".into()],
        }
    }
}

impl EditParams {
    pub fn validate(&self) -> Result<(), EditorError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(EditorError::Params(format!("temperature {} not in [0, 2]", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(EditorError::Params(format!("top_p {} not in (0, 1]", self.top_p)));
        }
        if self.max_tokens == 0 {
            return Err(EditorError::Params("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// One completion request. `original`, `keywords` and `target_wording` are
/// carried for backends that do not read the prompt (the mock).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditRequest {
    pub prompt: String,
    pub original: String,
    pub keywords: Vec<String>,
    pub target_wording: String,
}

pub trait LlmBackend: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, request: &EditRequest, params: &EditParams) -> Result<String, EditorError>;
}

/// Stable key for a (prompt, params) pair, sent as `Idempotency-Key`.
pub fn request_key(prompt: &str, params: &EditParams) -> String {
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    h.update([0u8]);
    h.update(serde_json::to_vec(params).expect("params serialize"));
    hex::encode(&h.finalize()[..16])
}

/// Sends `request` and returns the raw completion.
pub fn request_edit(request: &EditRequest, params: &EditParams, backend: &dyn LlmBackend) -> Result<String, EditorError> {
    if request.prompt.trim().is_empty() {
        return Err(EditorError::EmptyPrompt);
    }
    params.validate()?;
    let out = backend.complete(request, params)?;
    if out.trim().is_empty() {
        return Err(EditorError::EmptyCompletion);
    }
    Ok(out)
}

/// Deterministic stand-in: the original text followed by each keyword. With
/// no keywords it appends the target label wording instead, so that the
/// output still differs from the input.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockLlm;

impl LlmBackend for MockLlm {
    fn id(&self) -> String {
        "mock".into()
    }

    fn complete(&self, request: &EditRequest, _params: &EditParams) -> Result<String, EditorError> {
        let mut parts = vec![request.original.as_str()];
        if request.keywords.is_empty() {
            parts.push(&request.target_wording);
        } else {
            parts.extend(request.keywords.iter().map(String::as_str));
        }
        Ok(parts.join(" "))
    }
}

/// Client for `POST {"prompt", "temperature", "top_p", "max_tokens", "stop"}
/// -> {"completion"}`.
pub struct RemoteLlm {
    client: JsonClient,
    limiter: RateLimiter,
}

impl RemoteLlm {
    pub fn new(
        endpoint: impl Into<String>,
        transport: Box<dyn Transport>,
        retry: RetryPolicy,
        auth_env_var: Option<String>,
        requests_per_minute: u32,
    ) -> Self {
        Self {
            client: JsonClient::new(transport, endpoint.into(), retry, auth_env_var),
            limiter: RateLimiter::per_minute(requests_per_minute),
        }
    }
}

impl LlmBackend for RemoteLlm {
    fn id(&self) -> String {
        format!("remote:{}", self.client.url())
    }

    fn complete(&self, request: &EditRequest, params: &EditParams) -> Result<String, EditorError> {
        self.limiter.acquire();
        let body = json!({
            "prompt": request.prompt,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
            "stop": params.stop_sequences,
        });
        let key = request_key(&request.prompt, params);
        let out = self.client.call(&body, &[("Idempotency-Key".into(), key)])?;
        if out.attempts > 1 {
            log::info!("completion needed {} attempts", out.attempts);
        }
        let completion = out
            .body
            .get("completion")
            .and_then(Value::as_str)
            .ok_or_else(|| HttpError::Malformed("missing `completion` string".into()))?;
        Ok(completion.to_string())
    }
}
