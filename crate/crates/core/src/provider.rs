//! Remote-provider plumbing shared by completion and embedding clients.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ProviderError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("unexpected provider response: {0}")]
    BadResponse(String),
    #[error("api key environment variable `{0}` is not set")]
    MissingApiKey(String),
    #[error("network access disabled (offline mode)")]
    Offline,
}

/// Exponential backoff: attempt `n` (0-based) waits `base_delay * 2^n` before
/// the next try.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        Self {
            attempts,
            base_delay: Duration::ZERO,
        }
    }

    /// Runs `op` until it succeeds or the attempt budget is spent; returns the
    /// last error together with the number of attempts made.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, ProviderError>,
    ) -> Result<T, (u32, ProviderError)> {
        let attempts = self.attempts.max(1);
        let mut last = None;
        for attempt in 0..attempts {
            match op() {
                Ok(v) => return Ok(v),
                Err(ProviderError::MissingApiKey(k)) => {
                    return Err((attempt + 1, ProviderError::MissingApiKey(k)))
                }
                Err(e) => {
                    last = Some(e);
                    if attempt + 1 < attempts && !self.base_delay.is_zero() {
                        std::thread::sleep(self.base_delay * 2u32.pow(attempt));
                    }
                }
            }
        }
        Err((attempts, last.expect("at least one attempt")))
    }
}

/// JSON-over-HTTP endpoint description. The API key is never stored in
/// config; only the name of the environment variable holding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HttpEndpoint {
    pub base_url: String,
    pub path: String,
    pub model: String,
    pub auth_header: String,
    pub auth_prefix: String,
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
}

impl Default for HttpEndpoint {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com".into(),
            path: "/v1/completions".into(),
            model: "gpt-3.5-turbo-instruct".into(),
            auth_header: "Authorization".into(),
            auth_prefix: "Bearer ".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            timeout_secs: 60,
        }
    }
}

impl HttpEndpoint {
    pub fn url(&self) -> String {
        format!(
            "{}/{}",
            self.base_url.trim_end_matches('/'),
            self.path.trim_start_matches('/')
        )
    }

    pub(crate) fn agent(&self) -> ureq::Agent {
        ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(self.timeout_secs.max(1)))
            .build()
    }

    pub(crate) fn api_key(&self) -> Result<Option<String>, ProviderError> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| ProviderError::MissingApiKey(var.clone())),
        }
    }

    pub(crate) fn post_json(
        &self,
        agent: &ureq::Agent,
        api_key: Option<&str>,
        body: serde_json::Value,
    ) -> Result<serde_json::Value, ProviderError> {
        let mut req = agent.post(&self.url());
        if let Some(key) = api_key {
            req = req.set(&self.auth_header, &format!("{}{}", self.auth_prefix, key));
        }
        let resp = req
            .send_json(body)
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        resp.into_json::<serde_json::Value>()
            .map_err(|e| ProviderError::BadResponse(e.to_string()))
    }
}

/// Declares the flat, all-optional shape in which an endpoint-backed config
/// is written, so unknown keys are rejected and omitted keys fall back to
/// the owning config's defaults. An empty `api_key_env` disables auth.
macro_rules! endpoint_config_input {
    ($name:ident { $($field:ident: $ty:ty,)* }) => {
        #[derive(serde::Deserialize)]
        #[serde(deny_unknown_fields)]
        pub(crate) struct $name {
            base_url: Option<String>,
            path: Option<String>,
            model: Option<String>,
            auth_header: Option<String>,
            auth_prefix: Option<String>,
            api_key_env: Option<String>,
            timeout_secs: Option<u64>,
            $($field: Option<$ty>,)*
        }

        impl $name {
            fn endpoint_over(&mut self, mut e: $crate::provider::HttpEndpoint) -> $crate::provider::HttpEndpoint {
                if let Some(v) = self.base_url.take() { e.base_url = v; }
                if let Some(v) = self.path.take() { e.path = v; }
                if let Some(v) = self.model.take() { e.model = v; }
                if let Some(v) = self.auth_header.take() { e.auth_header = v; }
                if let Some(v) = self.auth_prefix.take() { e.auth_prefix = v; }
                if let Some(v) = self.api_key_env.take() { e.api_key_env = (!v.is_empty()).then_some(v); }
                if let Some(v) = self.timeout_secs.take() { e.timeout_secs = v; }
                e
            }
        }
    };
}
pub(crate) use endpoint_config_input;

/// Restricts an id to characters that are safe in a single path component.
pub(crate) fn path_safe(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn retries_until_success() {
        let calls = Cell::new(0);
        let out = RetryPolicy::immediate(3).run(|| {
            calls.set(calls.get() + 1);
            if calls.get() < 3 {
                Err(ProviderError::Transport("boom".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(out, Ok(7));
        assert_eq!(calls.get(), 3);
    }

    #[test]
    fn gives_up_after_budget() {
        let calls = Cell::new(0);
        let out: Result<(), _> = RetryPolicy::immediate(3).run(|| {
            calls.set(calls.get() + 1);
            Err(ProviderError::Transport("down".into()))
        });
        assert_eq!(out, Err((3, ProviderError::Transport("down".into()))));
        assert_eq!(calls.get(), 3);
    }

    #[test]
    fn url_joining_and_safe_ids() {
        let ep = HttpEndpoint {
            base_url: "http://localhost:8080/".into(),
            path: "/v1/completions".into(),
            ..Default::default()
        };
        assert_eq!(ep.url(), "http://localhost:8080/v1/completions");
        assert_eq!(path_safe("http:gpt/3.5"), "http_gpt_3.5");
    }
}
