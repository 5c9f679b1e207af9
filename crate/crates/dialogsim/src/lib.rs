//! Closed-loop simulation engine for persona-conditioned persuasive
//! dialogue.
//!
//! The crate covers the full pipeline:
//!
//! 1. [`persona`] — seeded sampling of user personas from weighted
//!    attribute specs, plus the attitude state space those personas move
//!    through during a conversation.
//! 2. [`prompts`] — the prompt templates for both conversation agents and
//!    all analysis agents, with strict placeholder handling.
//! 3. [`backends`] — the chat-completion seam: a deterministic scripted
//!    backend for tests and offline runs, an HTTP backend for real
//!    endpoints, and k-vote consensus sampling.
//! 4. [`engine`] — round-based self-play between a persuader (dialog
//!    agent) and a persona-conditioned user agent.
//! 5. [`coa`] — attitude-chain extraction and first-order Markov
//!    analytics: transition matrices, row entropies, normalized mean
//!    entropy, and Jensen-Shannon divergence between corpora.
//! 6. [`strategy`] — persuasion-strategy annotation against a fixed
//!    catalog with majority voting, and distribution statistics.
//! 7. [`judge`] — rubric scoring of finished dialogues, acceptance rates,
//!    and quality filtering.
//! 8. [`optimizer`] — the closed loop: simulate, measure, gate, and evolve
//!    the persuader's system prompt until targets are met.
//! 9. [`store`] — run directories, JSONL artifacts, fine-tune export, and
//!    external corpus ingestion.

pub mod backends;
pub mod coa;
pub mod engine;
pub mod error;
pub mod judge;
pub mod optimizer;
pub mod persona;
pub mod prompts;
pub mod store;
pub mod strategy;
pub mod util;

pub use error::{Error, Result};
