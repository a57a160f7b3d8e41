//! Chat-completion HTTP backbone for deployment. Wire format is the common
//! `/v1/chat/completions` JSON shape; transient failures are retried with
//! exponential backoff.

use serde::{Deserialize, Serialize};

use crate::state::PoolRng;
use crate::{Error, Result};

use super::{Backbone, BackboneRequest};

/// Retry/backoff knobs shared by the chat and embedding clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts, first try included.
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_attempts() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    1000
}
fn default_timeout_secs() -> u64 {
    120
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, backoff_base_ms: 1000, timeout_secs: 120 }
    }
}

/// POST a JSON body, retrying on transport errors, 429, and 5xx.
pub(crate) fn post_json_with_retries(
    client: &reqwest::blocking::Client,
    url: &str,
    body: &serde_json::Value,
    api_key: Option<&str>,
    policy: &RetryPolicy,
) -> Result<serde_json::Value> {
    let attempts = policy.max_attempts.max(1);
    let mut last_error = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            let delay = policy.backoff_base_ms.saturating_mul(1u64 << (attempt - 1));
            std::thread::sleep(std::time::Duration::from_millis(delay));
        }
        let mut builder = client.post(url).json(body);
        if let Some(key) = api_key {
            builder = builder.bearer_auth(key);
        }
        match builder.send() {
            Ok(response) => {
                let status = response.status();
                if status.is_success() {
                    return response
                        .json::<serde_json::Value>()
                        .map_err(|e| Error::Backend(format!("invalid json response: {e}")));
                }
                let retryable = status.as_u16() == 429 || status.is_server_error();
                last_error = format!("http status {status}");
                if !retryable {
                    return Err(Error::Backend(last_error));
                }
            }
            Err(e) => {
                last_error = format!("transport error: {e}");
            }
        }
    }
    Err(Error::Backend(format!(
        "exhausted {attempts} attempts: {last_error}"
    )))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_key_env() -> String {
    "EVOPOOL_API_KEY".to_string()
}

pub struct HttpBackbone {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackbone {
    pub fn new(config: HttpConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(config.retry.timeout_secs))
            .build()
            .map_err(|e| Error::Backend(format!("http client: {e}")))?;
        Ok(HttpBackbone { config, client })
    }

    fn system_message(request: &BackboneRequest) -> String {
        if request.injected_experience.is_empty() {
            return request.persona.clone();
        }
        let mut message = request.persona.clone();
        message.push_str("\n\nRelevant experience from past tasks:\n");
        for (i, entry) in request.injected_experience.iter().enumerate() {
            message.push_str(&format!("{}. {}\n", i + 1, entry));
        }
        message
    }
}

impl Backbone for HttpBackbone {
    fn invoke(&self, request: &BackboneRequest, _rng: &mut PoolRng) -> Result<String> {
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": Self::system_message(request)},
                {"role": "user", "content": request.prompt},
            ],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        });
        let api_key = std::env::var(&self.config.api_key_env).ok();
        let response = post_json_with_retries(
            &self.client,
            &self.config.endpoint,
            &body,
            api_key.as_deref(),
            &self.config.retry,
        )?;
        response["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Backend("response missing choices[0].message.content".into()))
    }
}
