//! Crate-wide error type.
//!
//! Every fallible operation in the crate returns [`Result`]. Variants carry
//! enough context (attribute names, dialogue ids, line numbers) that a CLI
//! can print them verbatim and the message still tells the operator where
//! to look.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Generic parse failure for config files and backend responses that
    /// never made it past the JSON layer.
    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },

    #[error("attribute `{attribute}`: probabilities sum to {sum}, expected 1.0")]
    ProbabilitySum { attribute: String, sum: f64 },

    #[error("attribute `{attribute}`: unknown distribution kind `{kind}`")]
    UnknownKind { attribute: String, kind: String },

    #[error("attribute `{attribute}`: negative probability {p} for candidate `{value}`")]
    NegativeProbability {
        attribute: String,
        value: String,
        p: f64,
    },

    #[error("attribute `{attribute}`: invalid numeric range [{lower}, {upper}] (step {step})")]
    InvalidRange {
        attribute: String,
        lower: f64,
        upper: f64,
        step: f64,
    },

    #[error("persona group `{group}`: {message}")]
    InvalidPersonaSpec { group: String, message: String },

    #[error("state space `{space}`: {message}")]
    InvalidStateSpace { space: String, message: String },

    #[error("attitude `{label}` is not in state space `{space}`")]
    UnknownState { label: String, space: String },

    #[error("state spaces differ: `{a}` vs `{b}`")]
    StateSpaceMismatch { a: String, b: String },

    #[error("transition matrix for `{which}` has no observed transitions")]
    EmptyTransitionMatrix { which: String },

    #[error("template `{template}`: missing required placeholder `{placeholder}`")]
    MissingPlaceholder {
        template: String,
        placeholder: String,
    },

    #[error("template `{template}`: placeholder `{placeholder}` has no binding")]
    UnresolvedPlaceholder {
        template: String,
        placeholder: String,
    },

    #[error("cannot send an empty message list")]
    EmptyMessages,

    #[error("invalid vote parameters: votes={votes}, quorum={quorum}")]
    InvalidQuorum { votes: u32, quorum: u32 },

    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("backend returned HTTP {status}: {body_excerpt}")]
    HttpStatus { status: u16, body_excerpt: String },

    #[error("malformed backend response: {message}")]
    MalformedResponse { message: String },

    #[error("scripted backend exhausted after {served} response(s)")]
    ScriptExhausted { served: usize },

    #[error("no scripted rule matches the request (first line: {excerpt:?})")]
    ScriptNoMatch { excerpt: String },

    #[error("invalid simulation job: {message}")]
    InvalidJob { message: String },

    #[error("all {count} dialogue(s) failed; partial collection {collection_id} was persisted")]
    AllDialoguesFailed { collection_id: String, count: usize },

    #[error("classifier output for dialogue {dialogue_id}: {message}")]
    ClassifierParse {
        dialogue_id: String,
        message: String,
    },

    #[error("classifier listed {got} attitude(s) for {expected} round(s) in dialogue {dialogue_id}")]
    RoundCountMismatch {
        dialogue_id: String,
        got: usize,
        expected: usize,
    },

    #[error("strategy code `{code}` is not in the catalog")]
    UnknownStrategy { code: String },

    #[error("invalid strategy catalog: {message}")]
    InvalidCatalog { message: String },

    #[error("occurrence cites turn {turn} but dialogue {dialogue_id} has {rounds} round(s)")]
    OccurrenceOutOfRange {
        dialogue_id: String,
        turn: u32,
        rounds: usize,
    },

    #[error("score `{metric}` = {value} is outside 0..=3")]
    ScoreOutOfRange { metric: String, value: i64 },

    #[error("no evaluation score recorded for dialogue {dialogue_id}")]
    MissingScore { dialogue_id: String },

    #[error("empty input: {what}")]
    EmptyInput { what: String },

    #[error("evolution response contains no Business SOP section")]
    EvolutionFailed,

    #[error("invalid config: {message}")]
    InvalidConfig { message: String },

    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },

    #[error("unknown {what} id `{id}`")]
    UnknownId { what: String, id: String },

    #[error("artifact {path} already exists with different content")]
    ArtifactConflict { path: String },

    #[error("run manifest drift: {message}")]
    ManifestDrift { message: String },
}

impl Error {
    /// Wrap a serde error with a human-readable description of what was
    /// being parsed (a path, a backend role, ...).
    pub fn parse(what: impl Into<String>, err: impl std::fmt::Display) -> Self {
        Error::Parse {
            what: what.into(),
            message: err.to_string(),
        }
    }
}
