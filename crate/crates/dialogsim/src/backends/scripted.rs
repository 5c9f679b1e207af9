//! Deterministic scripted backend for tests and offline runs.
//!
//! Two flavours:
//!
//! - **Queue**: pops pre-baked responses in order and errors when
//!   exhausted. Good for unit tests that control every call.
//! - **Rules**: routes each request to the first rule whose `contains`
//!   needle appears anywhere in the request messages, then picks one of the
//!   rule's responses by the rule's [`ResponseMode`]. Good for end-to-end
//!   runs where different prompt kinds (conversation, classifier, judge,
//!   optimizer) need different canned answers.
//!
//! The backend also instruments itself (call count, peak concurrent
//! requests, optional request capture) so tests can assert on parallelism
//! and on exactly what was sent.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::stable_hash_u64;

use super::{ChatBackend, ChatMessage, Role};

/// How a rule picks among its responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseMode {
    /// Round-robin over the responses, per rule, in call order.
    #[default]
    Cycle,
    /// Index by the conversation round implied by the request (number of
    /// non-system messages divided by two), wrapping around.
    ByRound,
    /// Index by a stable hash of the request content. Same request, same
    /// response — across runs and platforms.
    Hash,
}

/// One routing rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Substring matched against every message in the request; `None`
    /// matches anything.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    pub responses: Vec<String>,
    #[serde(default)]
    pub mode: ResponseMode,
}

/// A rule script, loadable from JSON.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    /// Fallback response when no rule matches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
    /// Artificial per-call latency, for exercising concurrency.
    #[serde(default)]
    pub latency_ms: u64,
}

impl Script {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let script: Script =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        script.validate()?;
        Ok(script)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, rule) in self.rules.iter().enumerate() {
            if rule.responses.is_empty() {
                return Err(Error::InvalidConfig {
                    message: format!("script rule {i} has no responses"),
                });
            }
        }
        Ok(())
    }
}

enum Source {
    Queue {
        items: Mutex<VecDeque<String>>,
        served: AtomicUsize,
    },
    Rules {
        script: Script,
        cycle_counters: Vec<AtomicUsize>,
    },
}

/// See the module docs.
pub struct ScriptedBackend {
    source: Source,
    latency: Option<Duration>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    captured: Option<Mutex<Vec<Vec<ChatMessage>>>>,
}

/// RAII guard for the in-flight gauge, so a panicking hook can't skew it.
struct FlightGuard<'a>(&'a AtomicUsize);

impl Drop for FlightGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl ScriptedBackend {
    /// Pop responses from a fixed queue; error once empty.
    pub fn from_queue<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::build(Source::Queue {
            items: Mutex::new(items.into_iter().map(Into::into).collect()),
            served: AtomicUsize::new(0),
        })
    }

    /// Route by rules.
    pub fn from_script(script: Script) -> Result<Self> {
        script.validate()?;
        let latency = (script.latency_ms > 0).then(|| Duration::from_millis(script.latency_ms));
        let cycle_counters = script.rules.iter().map(|_| AtomicUsize::new(0)).collect();
        let mut backend = Self::build(Source::Rules {
            script,
            cycle_counters,
        });
        backend.latency = latency;
        Ok(backend)
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_script(Script::load(path)?)
    }

    /// Always answer with the same text.
    pub fn constant(response: impl Into<String>) -> Self {
        Self::from_script(Script {
            rules: vec![],
            default: Some(response.into()),
            latency_ms: 0,
        })
        .expect("constant script is valid")
    }

    fn build(source: Source) -> Self {
        ScriptedBackend {
            source,
            latency: None,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            captured: None,
        }
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    /// Record every request for later inspection.
    pub fn with_capture(mut self) -> Self {
        self.captured = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Highest number of requests ever observed in flight at once.
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn captured(&self) -> Vec<Vec<ChatMessage>> {
        self.captured
            .as_ref()
            .map(|m| m.lock().expect("capture lock").clone())
            .unwrap_or_default()
    }

    fn respond(&self, messages: &[ChatMessage]) -> Result<String> {
        match &self.source {
            Source::Queue { items, served } => {
                let mut items = items.lock().expect("queue lock");
                match items.pop_front() {
                    Some(response) => {
                        served.fetch_add(1, Ordering::SeqCst);
                        Ok(response)
                    }
                    None => Err(Error::ScriptExhausted {
                        served: served.load(Ordering::SeqCst),
                    }),
                }
            }
            Source::Rules {
                script,
                cycle_counters,
            } => {
                for (i, rule) in script.rules.iter().enumerate() {
                    let matches = match &rule.contains {
                        None => true,
                        Some(needle) => messages.iter().any(|m| m.content.contains(needle)),
                    };
                    if !matches {
                        continue;
                    }
                    let n = rule.responses.len();
                    let idx = match rule.mode {
                        ResponseMode::Cycle => {
                            cycle_counters[i].fetch_add(1, Ordering::SeqCst) % n
                        }
                        ResponseMode::ByRound => {
                            let non_system =
                                messages.iter().filter(|m| m.role != Role::System).count();
                            (non_system / 2) % n
                        }
                        ResponseMode::Hash => {
                            let mut buf = Vec::new();
                            for m in messages {
                                buf.extend_from_slice(m.content.as_bytes());
                                buf.push(0);
                            }
                            (stable_hash_u64(&buf) % n as u64) as usize
                        }
                    };
                    return Ok(rule.responses[idx].clone());
                }
                if let Some(default) = &script.default {
                    return Ok(default.clone());
                }
                let excerpt: String = messages
                    .first()
                    .map(|m| m.content.lines().next().unwrap_or_default().to_string())
                    .unwrap_or_default();
                Err(Error::ScriptNoMatch { excerpt })
            }
        }
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        if messages.is_empty() {
            return Err(Error::EmptyMessages);
        }
        let current = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        let _guard = FlightGuard(&self.in_flight);
        self.max_in_flight.fetch_max(current, Ordering::SeqCst);
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(captured) = &self.captured {
            captured.lock().expect("capture lock").push(messages.to_vec());
        }
        if let Some(latency) = self.latency {
            std::thread::sleep(latency);
        }
        self.respond(messages)
    }

    fn model_name(&self) -> String {
        "scripted".into()
    }
}
