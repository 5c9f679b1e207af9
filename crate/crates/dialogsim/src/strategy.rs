//! Persuasion-strategy annotation and distribution statistics.
//!
//! Dialogues are annotated against a fixed strategy catalog (the shipped
//! default is the classic ten-strategy persuasion taxonomy) by an LLM
//! classifier. Because strategy extraction is noisy, each dialogue is
//! annotated with majority voting: the same request is sampled several
//! times and only a strategy *set* that a quorum of votes agrees on is
//! accepted. A dialogue whose votes never agree keeps an explicitly empty,
//! low-confidence annotation rather than a made-up one.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backends::{complete_vote, ChatBackend, ChatMessage};
use crate::coa::extract_json_object;
use crate::engine::Dialogue;
use crate::error::{Error, Result};
use crate::prompts::TemplateSet;
use crate::util::sha256_hex;

/// Votes sampled per dialogue.
pub const DEFAULT_VOTES: u32 = 3;
/// Votes that must agree on the strategy set.
pub const DEFAULT_QUORUM: u32 = 2;

/// Frozen note on the coefficient-of-variation convention. The previously
/// reported reference statistics for this metric family list a CV row that
/// cannot be derived from their own sigma row under any fixed mean share
/// (sigma times catalog size does not reproduce any listed CV), so those
/// CV values are descriptive only, never a verification target.
pub const CV_NOTE: &str = "cv = sigma / (1/|catalog|), the coefficient of variation of \
     strategy-usage shares against the uniform mean. Previously reported reference CV \
     values cannot be derived from their own sigma values under any fixed mean share and \
     are therefore not a verification target.";

/// One catalog entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyEntry {
    /// Stable machine code, e.g. `logical_appeal`.
    pub code: String,
    /// Display name, e.g. `Logical Appeal`.
    pub name: String,
    /// What has to be true of an utterance for this strategy to apply.
    pub description: String,
}

/// An ordered strategy catalog.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyCatalog {
    pub name: String,
    entries: Vec<StrategyEntry>,
}

impl StrategyCatalog {
    pub fn new(name: impl Into<String>, entries: Vec<StrategyEntry>) -> Result<Self> {
        let name = name.into();
        if entries.is_empty() {
            return Err(Error::InvalidCatalog {
                message: format!("catalog `{name}` has no entries"),
            });
        }
        let mut seen = BTreeSet::new();
        for entry in &entries {
            if entry.code.is_empty() || entry.description.is_empty() {
                return Err(Error::InvalidCatalog {
                    message: format!(
                        "catalog `{name}`: entry `{}` needs a code and a description",
                        entry.code
                    ),
                });
            }
            if !seen.insert(entry.code.to_lowercase()) {
                return Err(Error::InvalidCatalog {
                    message: format!("catalog `{name}`: duplicate code `{}`", entry.code),
                });
            }
        }
        Ok(StrategyCatalog { name, entries })
    }

    /// The shipped ten-strategy persuasion taxonomy.
    pub fn p4g_default() -> Self {
        serde_json::from_str::<StrategyCatalog>(include_str!("../assets/p4g_catalog.json"))
            .expect("builtin catalog parses")
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let raw: StrategyCatalog =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        Self::new(raw.name, raw.entries)
    }

    pub fn entries(&self) -> &[StrategyEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Resolve a classifier-reported identifier to a canonical code.
    /// Matches the code or the display name, case-insensitively.
    pub fn resolve(&self, raw: &str) -> Option<&str> {
        let needle = raw.trim().to_lowercase();
        self.entries
            .iter()
            .find(|e| e.code.to_lowercase() == needle || e.name.to_lowercase() == needle)
            .map(|e| e.code.as_str())
    }

    /// The definition table injected into classifier prompts.
    pub fn definition_table(&self) -> String {
        let mut out = String::from("code | name | description\n");
        for entry in &self.entries {
            out.push_str(&format!(
                "{} | {} | {}\n",
                entry.code, entry.name, entry.description
            ));
        }
        out
    }

    /// Content digest, recorded in run manifests.
    pub fn digest(&self) -> String {
        sha256_hex(
            serde_json::to_string(&self)
                .expect("catalog serializes")
                .as_bytes(),
        )
    }
}

/// One place a strategy was observed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Occurrence {
    pub code: String,
    /// 1-based round number the excerpt came from.
    pub turn: u32,
    pub excerpt: String,
    pub explanation: String,
}

/// Voted strategy annotation for a single dialogue.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyAnnotation {
    pub dialogue_id: String,
    /// Canonical catalog codes the quorum agreed on; empty when no quorum.
    pub strategies: BTreeSet<String>,
    /// Occurrences from the winning vote.
    pub occurrences: Vec<Occurrence>,
    /// Whether a quorum was reached at all.
    pub quorum: bool,
    /// Largest agreeing class over votes requested.
    pub vote_agreement: f64,
}

// -- classifier response shape ----------------------------------------------

#[derive(Deserialize)]
struct RawOccurrence {
    turn: serde_json::Value,
    #[serde(default)]
    original_text: String,
    #[serde(default)]
    explanation: String,
}

#[derive(Deserialize)]
struct RawDetail {
    strategy_id: String,
    #[allow(dead_code)]
    #[serde(default)]
    strategy_name: String,
    #[allow(dead_code)]
    #[serde(default)]
    reason: String,
    #[serde(default)]
    occurrences: Vec<RawOccurrence>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    total_strategies: Vec<String>,
    #[serde(default)]
    strategy_details: Vec<RawDetail>,
}

fn parse_annotation(text: &str) -> Option<RawAnnotation> {
    serde_json::from_str(extract_json_object(text)?).ok()
}

/// The vote equivalence key: the resolved, canonical strategy set. `None`
/// (an invalid vote) if the response is unparseable or names something
/// outside the catalog.
fn vote_key(text: &str, catalog: &StrategyCatalog) -> Option<BTreeSet<String>> {
    let raw = parse_annotation(text)?;
    let mut set = BTreeSet::new();
    for code in &raw.total_strategies {
        set.insert(catalog.resolve(code)?.to_string());
    }
    Some(set)
}

fn parse_turn(value: &serde_json::Value) -> Option<u32> {
    match value {
        serde_json::Value::Number(n) => n.as_u64().map(|v| v as u32),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// Annotate one dialogue with the default vote parameters.
pub fn annotate_strategies(
    dialogue: &Dialogue,
    catalog: &StrategyCatalog,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
) -> Result<StrategyAnnotation> {
    annotate_strategies_with(
        dialogue,
        catalog,
        backend,
        templates,
        DEFAULT_VOTES,
        DEFAULT_QUORUM,
    )
}

/// Annotate one dialogue, sampling `votes` classifications and requiring
/// `quorum` of them to agree on the strategy set. The winning vote's
/// occurrences are validated against the catalog and the dialogue's round
/// count; a vote that never reaches quorum yields an empty annotation with
/// `quorum: false` rather than an error.
pub fn annotate_strategies_with(
    dialogue: &Dialogue,
    catalog: &StrategyCatalog,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
    votes: u32,
    quorum: u32,
) -> Result<StrategyAnnotation> {
    if dialogue.turns.is_empty() {
        return Err(Error::EmptyInput {
            what: format!("dialogue {} has no completed rounds", dialogue.id),
        });
    }
    let prompt =
        templates.render_p4g_classifier(&dialogue.transcript(), &catalog.definition_table())?;
    let messages = [ChatMessage::user(prompt)];
    let outcome = complete_vote(backend, &messages, votes, quorum, |text| {
        vote_key(text, catalog)
    })?;

    let Some(winner) = outcome.winner else {
        return Ok(StrategyAnnotation {
            dialogue_id: dialogue.id.clone(),
            strategies: BTreeSet::new(),
            occurrences: Vec::new(),
            quorum: false,
            vote_agreement: outcome.agreement,
        });
    };

    let winning_text = &outcome.responses[winner];
    let raw = parse_annotation(winning_text).expect("winner parsed during voting");
    let strategies = vote_key(winning_text, catalog).expect("winner keyed during voting");

    let mut occurrences = Vec::new();
    for detail in &raw.strategy_details {
        let code = catalog
            .resolve(&detail.strategy_id)
            .ok_or_else(|| Error::UnknownStrategy {
                code: detail.strategy_id.clone(),
            })?
            .to_string();
        for occurrence in &detail.occurrences {
            let turn = parse_turn(&occurrence.turn).unwrap_or(0);
            if turn == 0 || turn as usize > dialogue.rounds() {
                return Err(Error::OccurrenceOutOfRange {
                    dialogue_id: dialogue.id.clone(),
                    turn,
                    rounds: dialogue.rounds(),
                });
            }
            occurrences.push(Occurrence {
                code: code.clone(),
                turn,
                excerpt: occurrence.original_text.clone(),
                explanation: occurrence.explanation.clone(),
            });
        }
    }

    Ok(StrategyAnnotation {
        dialogue_id: dialogue.id.clone(),
        strategies,
        occurrences,
        quorum: true,
        vote_agreement: outcome.agreement,
    })
}

/// Annotate a whole collection in order, skipping dialogues with no
/// completed rounds (their ids are returned separately).
pub fn annotate_collection(
    dialogues: &[Dialogue],
    catalog: &StrategyCatalog,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
) -> Result<(Vec<StrategyAnnotation>, Vec<String>)> {
    let mut annotations = Vec::with_capacity(dialogues.len());
    let mut skipped = Vec::new();
    for dialogue in dialogues {
        if dialogue.turns.is_empty() {
            skipped.push(dialogue.id.clone());
            continue;
        }
        annotations.push(annotate_strategies(dialogue, catalog, backend, templates)?);
    }
    Ok((annotations, skipped))
}

/// Per-strategy usage share.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyShare {
    pub code: String,
    /// Number of dialogues whose annotation contains the strategy.
    pub count: u64,
    /// `count` over the total presence count, so shares sum to 1 whenever
    /// anything was observed.
    pub share: f64,
}

/// Distribution statistics over a set of annotations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyReport {
    /// Mean number of distinct strategies per annotated dialogue.
    pub c_str: f64,
    /// Sample standard deviation of the share distribution.
    pub sigma: f64,
    /// `sigma` divided by the uniform mean share `1/|catalog|` — the
    /// coefficient of variation of strategy usage.
    pub cv: f64,
    pub shares: Vec<StrategyShare>,
    pub annotation_count: usize,
    /// Annotations that never reached quorum (counted in `annotation_count`
    /// with empty strategy sets).
    pub no_quorum_count: usize,
    /// Fixed note documenting the CV convention; see [`CV_NOTE`].
    pub note: String,
}

/// Aggregate annotations into usage statistics against `catalog`.
pub fn strategy_report(
    annotations: &[StrategyAnnotation],
    catalog: &StrategyCatalog,
) -> Result<StrategyReport> {
    if annotations.is_empty() {
        return Err(Error::EmptyInput {
            what: "strategy annotations".into(),
        });
    }
    let n = catalog.len();
    let mut counts = vec![0u64; n];
    for annotation in annotations {
        for code in &annotation.strategies {
            let index = catalog
                .entries()
                .iter()
                .position(|e| &e.code == code)
                .ok_or_else(|| Error::UnknownStrategy { code: code.clone() })?;
            counts[index] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let shares: Vec<f64> = if total == 0 {
        vec![0.0; n]
    } else {
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    };
    let c_str = annotations
        .iter()
        .map(|a| a.strategies.len() as f64)
        .sum::<f64>()
        / annotations.len() as f64;
    let sigma = if n < 2 {
        0.0
    } else {
        let mean = shares.iter().sum::<f64>() / n as f64;
        let variance =
            shares.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        variance.sqrt()
    };
    // Uniform usage would put 1/n everywhere; cv measures spread against it.
    let cv = sigma * n as f64;
    Ok(StrategyReport {
        c_str,
        sigma,
        cv,
        shares: catalog
            .entries()
            .iter()
            .zip(counts.iter().zip(shares.iter()))
            .map(|(entry, (&count, &share))| StrategyShare {
                code: entry.code.clone(),
                count,
                share,
            })
            .collect(),
        annotation_count: annotations.len(),
        no_quorum_count: annotations.iter().filter(|a| !a.quorum).count(),
        note: CV_NOTE.to_string(),
    })
}

/// Share distribution of several corpora side by side: one row per
/// strategy, one column per group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShareTable {
    pub codes: Vec<String>,
    pub groups: Vec<String>,
    /// `rows[strategy][group]`.
    pub rows: Vec<Vec<f64>>,
}

impl ShareTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy");
        for group in &self.groups {
            out.push(',');
            out.push_str(group);
        }
        out.push('\n');
        for (code, row) in self.codes.iter().zip(&self.rows) {
            out.push_str(code);
            for share in row {
                out.push(',');
                out.push_str(&format!("{share}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Build the cross-group share table.
pub fn share_table(
    groups: &[(String, Vec<StrategyAnnotation>)],
    catalog: &StrategyCatalog,
) -> Result<ShareTable> {
    let mut columns = Vec::with_capacity(groups.len());
    for (_, annotations) in groups {
        let report = strategy_report(annotations, catalog)?;
        columns.push(report.shares.iter().map(|s| s.share).collect::<Vec<_>>());
    }
    Ok(ShareTable {
        codes: catalog.entries().iter().map(|e| e.code.clone()).collect(),
        groups: groups.iter().map(|(name, _)| name.clone()).collect(),
        rows: (0..catalog.len())
            .map(|i| columns.iter().map(|col| col[i]).collect())
            .collect(),
    })
}
