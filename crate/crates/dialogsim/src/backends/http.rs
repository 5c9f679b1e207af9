//! HTTP chat-completion backend.
//!
//! Speaks the common chat-completions wire shape: POST a JSON body with
//! `model`, `messages`, `temperature` and `max_tokens` (plus `seed` when the
//! config pins one), read `choices[0].message.content` back. Transient
//! failures — transport errors, HTTP 429 and 5xx — are retried with
//! exponential backoff per the config's [`RetryPolicy`]; anything else
//! fails fast with the status and a body excerpt.

use std::time::Duration;

use serde_json::json;

use crate::error::{Error, Result};

use super::{BackendConfig, ChatBackend, ChatMessage};

/// See the module docs.
#[derive(Debug)]
pub struct HttpBackend {
    config: BackendConfig,
    auth_header: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self> {
        config.validate()?;
        // Resolve the bearer token up front so a missing variable fails at
        // construction, not in the middle of a run.
        let auth_header = match &config.auth_env {
            Some(var) => match std::env::var(var) {
                Ok(token) => Some(format!("Bearer {token}")),
                Err(_) => {
                    return Err(Error::InvalidConfig {
                        message: format!("auth environment variable `{var}` is not set"),
                    })
                }
            },
            None => None,
        };
        let agent_config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build();
        Ok(HttpBackend {
            config,
            auth_header,
            agent: ureq::Agent::new_with_config(agent_config),
        })
    }

    fn request_body(&self, messages: &[ChatMessage]) -> String {
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        });
        if let Some(seed) = self.config.seed {
            body["seed"] = json!(seed);
        }
        body.to_string()
    }

    fn send_once(&self, body: &str) -> std::result::Result<(u16, String), String> {
        let mut request = self
            .agent
            .post(&self.config.endpoint)
            .header("Content-Type", "application/json");
        if let Some(auth) = &self.auth_header {
            request = request.header("Authorization", auth);
        }
        match request.send(body) {
            Ok(mut response) => {
                let status = response.status().as_u16();
                let text = response
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| format!("reading response body: {e}"))?;
                Ok((status, text))
            }
            Err(e) => Err(e.to_string()),
        }
    }

    fn parse_content(text: &str) -> Result<String> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| {
            Error::MalformedResponse {
                message: format!("response is not JSON: {e}"),
            }
        })?;
        value
            .pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(|s| s.to_string())
            .ok_or_else(|| Error::MalformedResponse {
                message: "missing choices[0].message.content".into(),
            })
    }
}

fn retriable(status: u16) -> bool {
    status == 429 || (500..=599).contains(&status)
}

fn excerpt(text: &str) -> String {
    let trimmed = text.trim();
    if trimmed.len() <= 200 {
        trimmed.to_string()
    } else {
        let mut end = 200;
        while !trimmed.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}...", &trimmed[..end])
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        if messages.is_empty() {
            return Err(Error::EmptyMessages);
        }
        let body = self.request_body(messages);
        let max_attempts = self.config.retry.max_attempts;
        let mut backoff = Duration::from_millis(self.config.retry.initial_backoff_ms);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let failure = match self.send_once(&body) {
                Ok((status, text)) if (200..300).contains(&status) => {
                    return Self::parse_content(&text)
                }
                Ok((status, text)) => {
                    if !retriable(status) {
                        return Err(Error::HttpStatus {
                            status,
                            body_excerpt: excerpt(&text),
                        });
                    }
                    format!("HTTP {status}: {}", excerpt(&text))
                }
                Err(message) => message,
            };
            if attempt >= max_attempts {
                return Err(Error::Transport {
                    attempts: attempt,
                    message: failure,
                });
            }
            std::thread::sleep(backoff);
            backoff = backoff.saturating_mul(2);
        }
    }

    fn model_name(&self) -> String {
        self.config.model.clone()
    }
}
