//! Chat-completion backends.
//!
//! Everything that talks to a language model goes through the
//! [`ChatBackend`] trait, so the rest of the crate never knows whether it
//! is driving a real HTTP endpoint ([`HttpBackend`]) or a canned script
//! ([`ScriptedBackend`]). Backends are synchronous and must be shareable
//! across the engine's worker threads.

mod http;
mod scripted;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use http::HttpBackend;
pub use scripted::{ResponseMode, Script, ScriptRule, ScriptedBackend};

/// Message author role, serialized in the wire format's lowercase form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// One chat message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Retry behaviour for transient failures (transport errors, HTTP 429 and
/// 5xx). Backoff doubles per attempt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 250,
        }
    }
}

fn default_temperature() -> f64 {
    0.7
}

fn default_max_tokens() -> u32 {
    1024
}

fn default_timeout_secs() -> u64 {
    60
}

/// Configuration for an HTTP chat-completion endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Name of the environment variable holding the bearer token. `None`
    /// sends no Authorization header (local endpoints).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    /// Sampling seed, forwarded to the endpoint only when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl BackendConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        BackendConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            timeout_secs: default_timeout_secs(),
            retry: RetryPolicy::default(),
            auth_env: None,
            seed: None,
        }
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let config: BackendConfig = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.endpoint.is_empty() || self.model.is_empty() {
            return Err(Error::InvalidConfig {
                message: "backend endpoint and model must be non-empty".into(),
            });
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::InvalidConfig {
                message: format!("temperature {} outside 0..=2", self.temperature),
            });
        }
        if self.max_tokens == 0 || self.retry.max_attempts == 0 {
            return Err(Error::InvalidConfig {
                message: "max_tokens and retry.max_attempts must be positive".into(),
            });
        }
        Ok(())
    }

    /// Deterministic variant: temperature 0 and a fixed sampling seed.
    pub fn deterministic(mut self, seed: u64) -> Self {
        self.temperature = 0.0;
        self.seed = Some(seed);
        self
    }
}

/// A synchronous chat-completion backend. Implementations must be safe to
/// call from several worker threads at once.
pub trait ChatBackend: Send + Sync {
    /// Complete `messages` into one assistant response. `messages` must be
    /// non-empty.
    fn complete(&self, messages: &[ChatMessage]) -> Result<String>;

    /// Model identifier recorded in dialogue metadata.
    fn model_name(&self) -> String;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        (**self).complete(messages)
    }

    fn model_name(&self) -> String {
        (**self).model_name()
    }
}

/// Outcome of a k-vote consensus call.
#[derive(Debug, Clone)]
pub struct VoteOutcome {
    /// Raw responses in call order (may be shorter than `votes` if a later
    /// call failed after the quorum was already reached).
    pub responses: Vec<String>,
    /// Whether any equivalence class reached the quorum.
    pub quorum_met: bool,
    /// Index into `responses` of the first member of the winning class,
    /// when the quorum was met.
    pub winner: Option<usize>,
    /// Size of the largest equivalence class divided by the number of
    /// votes requested.
    pub agreement: f64,
}

/// Sample the same request `votes` times and group the responses by the
/// caller's equivalence key (e.g. the parsed strategy set). Responses for
/// which `key` returns `None` (unparseable) never form a class. Ties go to
/// the class seen first.
///
/// A backend error mid-vote is fatal only if the quorum has not yet been
/// reached; otherwise the partial result stands.
pub fn complete_vote<K, F>(
    backend: &dyn ChatBackend,
    messages: &[ChatMessage],
    votes: u32,
    quorum: u32,
    key: F,
) -> Result<VoteOutcome>
where
    K: Eq + std::hash::Hash,
    F: Fn(&str) -> Option<K>,
{
    if quorum == 0 || quorum > votes {
        return Err(Error::InvalidQuorum { votes, quorum });
    }
    let mut responses: Vec<String> = Vec::with_capacity(votes as usize);
    let mut classes: HashMap<K, Vec<usize>> = HashMap::new();
    let mut best: usize = 0;
    for _ in 0..votes {
        match backend.complete(messages) {
            Ok(response) => {
                let idx = responses.len();
                if let Some(k) = key(&response) {
                    let members = classes.entry(k).or_default();
                    members.push(idx);
                    best = best.max(members.len());
                }
                responses.push(response);
            }
            Err(err) => {
                if best >= quorum as usize {
                    break;
                }
                return Err(err);
            }
        }
    }
    let quorum_met = best >= quorum as usize;
    // Winner: the class with the most members; ties resolved towards the
    // class whose first response arrived earliest.
    let winner = if quorum_met {
        classes
            .values()
            .filter(|members| members.len() == best)
            .map(|members| members[0])
            .min()
    } else {
        None
    };
    Ok(VoteOutcome {
        responses,
        quorum_met,
        winner,
        agreement: best as f64 / votes as f64,
    })
}
