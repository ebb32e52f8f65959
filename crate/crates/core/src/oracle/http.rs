use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{Oracle, OracleError, OracleRequest, TOKEN_ENV};

/// OpenAI-style `POST {base_url}/chat/completions` client.
#[derive(Debug)]
pub struct HttpOracle {
    endpoint: String,
    model: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpOracle {
    /// Reads the bearer token from `DISCURATE_ORACLE_TOKEN` when set.
    pub fn new(base_url: &str, model: &str, timeout: Duration) -> Result<Self, OracleError> {
        Self::with_token(base_url, model, std::env::var(TOKEN_ENV).ok(), timeout)
    }

    pub fn with_token(
        base_url: &str,
        model: &str,
        token: Option<String>,
        timeout: Duration,
    ) -> Result<Self, OracleError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| OracleError::Config(e.to_string()))?;
        Ok(Self {
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.to_string(),
            token,
            client,
        })
    }

    /// Request body for `request`, with images inlined as base64 data URLs.
    pub fn payload(&self, request: &OracleRequest) -> Result<Value, OracleError> {
        let mut content = vec![json!({"type": "text", "text": request.text})];
        for img in &request.images {
            let bytes = std::fs::read(&img.path).map_err(|e| {
                OracleError::Config(format!("cannot read image {}: {e}", img.path.display()))
            })?;
            let mime = match img
                .path
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase)
                .as_deref()
            {
                Some("jpg") | Some("jpeg") => "image/jpeg",
                _ => "image/png",
            };
            let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:{mime};base64,{b64}")}
            }));
        }
        Ok(json!({
            "model": self.model,
            "max_tokens": request.max_tokens,
            "messages": [{"role": "user", "content": content}],
        }))
    }
}

impl Oracle for HttpOracle {
    fn complete(&self, request: &OracleRequest) -> Result<String, OracleError> {
        let body = self.payload(request)?;
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req
            .send()
            .map_err(|e| OracleError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(OracleError::Transport(format!("HTTP {status}")));
        }
        let v: Value = resp
            .json()
            .map_err(|e| OracleError::Transport(format!("bad response body: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| OracleError::Transport("response has no message content".into()))
    }
}
