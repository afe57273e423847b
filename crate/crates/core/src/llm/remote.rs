//! Chat-completion client with retry and exponential backoff.

use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;
use tracing::warn;

use super::{LlmProvider, ProviderConfig, ProviderError, Role};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    /// Network errors, timeouts, 429 and 5xx. Worth retrying.
    #[error("retryable: {0}")]
    Retryable(String),
    #[error("fatal: {0}")]
    Fatal(String),
}

/// Minimal JSON-over-HTTP POST used by the remote provider and embedder.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<Value, TransportError>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| TransportError::Fatal(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<Value, TransportError> {
        let mut req = self.client.post(url).timeout(timeout).json(body);
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| TransportError::Retryable(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(TransportError::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(TransportError::Fatal(format!("HTTP {status}: {text}")));
        }
        resp.json::<Value>().map_err(|e| TransportError::Fatal(e.to_string()))
    }
}

/// Runs `call` up to `1 + max_retries` times, doubling the delay after each
/// retryable failure.
pub(crate) fn with_retries<T>(
    cfg: &ProviderConfig,
    mut call: impl FnMut() -> Result<T, TransportError>,
) -> Result<T, TransportError> {
    let mut attempt = 0u32;
    loop {
        match call() {
            Ok(v) => return Ok(v),
            Err(TransportError::Retryable(msg)) if attempt < cfg.max_retries => {
                let delay = cfg.backoff_ms.saturating_mul(1u64 << attempt.min(16));
                warn!(attempt, delay_ms = delay, "transient provider failure: {msg}");
                if delay > 0 {
                    std::thread::sleep(Duration::from_millis(delay));
                }
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

pub(crate) fn bearer_token(cfg: &ProviderConfig) -> Option<String> {
    std::env::var(&cfg.api_key_env).ok().filter(|s| !s.is_empty())
}

pub(crate) fn join_url(endpoint: &str, path: &str) -> String {
    format!("{}/{}", endpoint.trim_end_matches('/'), path.trim_start_matches('/'))
}

pub struct RemoteProvider<T = HttpTransport> {
    cfg: ProviderConfig,
    transport: T,
}

impl RemoteProvider<HttpTransport> {
    pub fn http(cfg: ProviderConfig) -> Result<Self, TransportError> {
        Ok(Self::new(cfg, HttpTransport::new()?))
    }
}

impl<T: Transport> RemoteProvider<T> {
    pub fn new(cfg: ProviderConfig, transport: T) -> Self {
        Self { cfg, transport }
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.cfg
    }

    fn request_body(&self, role: Role, prompt: &str) -> Value {
        json!({
            "model": self.cfg.models.get(role),
            "temperature": self.cfg.temperatures.get(role),
            "messages": [{"role": "user", "content": prompt}],
        })
    }
}

impl<T: Transport> LlmProvider for RemoteProvider<T> {
    fn complete(&self, role: Role, prompt: &str) -> Result<String, ProviderError> {
        let url = join_url(&self.cfg.endpoint, &self.cfg.chat_path);
        let body = self.request_body(role, prompt);
        let bearer = bearer_token(&self.cfg);
        let timeout = Duration::from_secs(self.cfg.timeout_secs);
        let reply = with_retries(&self.cfg, || {
            self.transport.post_json(&url, bearer.as_deref(), &body, timeout)
        })
        .map_err(|e| ProviderError::Transport {
            role,
            message: e.to_string(),
        })?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ProviderError::InvalidResponse("missing choices[0].message.content".into()))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::sync::Mutex;

    /// Fails with a retryable error `failures` times, then answers.
    pub(crate) struct FlakyTransport {
        pub failures: Mutex<usize>,
        pub calls: Mutex<Vec<Value>>,
        pub reply: Value,
    }

    impl FlakyTransport {
        pub fn new(failures: usize, reply: Value) -> Self {
            Self {
                failures: Mutex::new(failures),
                calls: Mutex::new(Vec::new()),
                reply,
            }
        }
    }

    impl Transport for FlakyTransport {
        fn post_json(&self, _url: &str, _b: Option<&str>, body: &Value, _t: Duration) -> Result<Value, TransportError> {
            self.calls.lock().unwrap().push(body.clone());
            let mut left = self.failures.lock().unwrap();
            if *left > 0 {
                *left -= 1;
                return Err(TransportError::Retryable("connection reset".into()));
            }
            Ok(self.reply.clone())
        }
    }

    fn cfg(retries: u32) -> ProviderConfig {
        ProviderConfig {
            max_retries: retries,
            backoff_ms: 0,
            ..ProviderConfig::default()
        }
    }

    fn chat_reply(text: &str) -> Value {
        json!({"choices": [{"message": {"role": "assistant", "content": text}}]})
    }

    #[test]
    fn retries_transient_failures() {
        let p = RemoteProvider::new(cfg(3), FlakyTransport::new(2, chat_reply("ok")));
        assert_eq!(p.complete(Role::Answer, "q").unwrap(), "ok");
        assert_eq!(p.transport.calls.lock().unwrap().len(), 3);
    }

    #[test]
    fn gives_up_after_max_retries() {
        let p = RemoteProvider::new(cfg(1), FlakyTransport::new(2, chat_reply("ok")));
        assert!(matches!(
            p.complete(Role::Answer, "q"),
            Err(ProviderError::Transport { .. })
        ));
        assert_eq!(p.transport.calls.lock().unwrap().len(), 2);
    }

    #[test]
    fn request_carries_role_model_and_temperature() {
        let p = RemoteProvider::new(cfg(0), FlakyTransport::new(0, chat_reply("ok")));
        p.complete(Role::Evidence, "hello").unwrap();
        let body = p.transport.calls.lock().unwrap()[0].clone();
        assert_eq!(body["model"], "gpt-4o-mini");
        assert_eq!(body["temperature"], 0.7);
        assert_eq!(body["messages"][0]["content"], "hello");
    }

    #[test]
    fn malformed_reply() {
        let p = RemoteProvider::new(cfg(0), FlakyTransport::new(0, json!({"nope": 1})));
        assert!(matches!(
            p.complete(Role::Answer, "q"),
            Err(ProviderError::InvalidResponse(_))
        ));
    }

    #[test]
    fn url_join() {
        assert_eq!(join_url("http://h/", "/v1/x"), "http://h/v1/x");
        assert_eq!(join_url("http://h", "v1/x"), "http://h/v1/x");
    }
}
