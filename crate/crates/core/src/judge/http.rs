use std::time::Duration;

use super::backend::{BackendError, ChatRequest, JudgeBackend};

/// OpenAI-compatible `POST {base_url}/chat/completions` backend.
pub struct HttpJudge {
    base_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpJudge {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpJudge")
            .field("base_url", &self.base_url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpJudge {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, request_timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(request_timeout))
            .http_status_as_error(false)
            .build();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.filter(|k| !k.is_empty()),
            agent: ureq::Agent::new_with_config(config),
        }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url)
    }
}

fn redact(message: &str, key: Option<&str>) -> String {
    match key {
        Some(k) if !k.is_empty() => message.replace(k, "<redacted>"),
        _ => message.to_string(),
    }
}

impl JudgeBackend for HttpJudge {
    fn id(&self) -> String {
        format!("http:{}", self.base_url)
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let key = self.api_key.as_deref();
        let mut req = self.agent.post(&self.endpoint());
        if let Some(k) = key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut response = req.send_json(request).map_err(|e| {
            let msg = redact(&e.to_string(), key);
            log::warn!("judge request to {} failed: {msg}", self.base_url);
            match e {
                ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed => {
                    BackendError::Transient(msg)
                }
                _ => BackendError::Fatal(msg),
            }
        })?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(redact(&e.to_string(), key)))?;
        if status == 429 || status >= 500 {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(BackendError::Fatal(format!("HTTP {status}: {}", redact(&body, key))));
        }
        let value: serde_json::Value = serde_json::from_str(&body)
            .map_err(|e| BackendError::Fatal(format!("invalid response body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Fatal("response has no choices[0].message.content".into()))
    }
}
