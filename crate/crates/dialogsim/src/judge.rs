//! Quality scoring and corpus filtering.
//!
//! A judge model grades finished dialogues on five 0–3 metrics
//! (authenticity, relevance, consistency, efficiency, human-likeness) and a
//! boolean task-success verdict. Scores gate two things: the acceptance
//! rate fed into the optimization loop, and quantile-based filtering of a
//! collection down to a fine-tune-worthy subset.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backends::{ChatBackend, ChatMessage};
use crate::coa::{extract_json_object, AttitudeChain};
use crate::engine::Dialogue;
use crate::error::{Error, Result};
use crate::prompts::TemplateSet;

/// The graded metric names, in report order.
pub const METRICS: [&str; 5] = [
    "authenticity",
    "relevance",
    "consistency",
    "efficiency",
    "human_likeness",
];

/// Maximum value of each graded metric.
pub const MAX_SCORE: u8 = 3;

/// Judge verdict for one dialogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationScores {
    pub dialogue_id: String,
    pub authenticity: u8,
    pub relevance: u8,
    pub consistency: u8,
    pub efficiency: u8,
    pub human_likeness: u8,
    pub task_success: bool,
    /// Optional per-metric reasoning returned by the judge.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub rationale: BTreeMap<String, String>,
}

impl EvaluationScores {
    /// The graded metrics paired with their names, in [`METRICS`] order.
    pub fn graded(&self) -> [(&'static str, u8); 5] {
        [
            (METRICS[0], self.authenticity),
            (METRICS[1], self.relevance),
            (METRICS[2], self.consistency),
            (METRICS[3], self.efficiency),
            (METRICS[4], self.human_likeness),
        ]
    }

    /// Mean of the five graded metrics.
    pub fn mean(&self) -> f64 {
        self.graded().iter().map(|(_, v)| *v as f64).sum::<f64>() / 5.0
    }
}

#[derive(Deserialize)]
struct RawScores {
    authenticity: i64,
    relevance: i64,
    consistency: i64,
    efficiency: i64,
    human_likeness: i64,
    task_success: bool,
    #[serde(default)]
    rationale: BTreeMap<String, String>,
}

fn checked(metric: &'static str, value: i64) -> Result<u8> {
    if (0..=MAX_SCORE as i64).contains(&value) {
        Ok(value as u8)
    } else {
        Err(Error::ScoreOutOfRange {
            metric: metric.to_string(),
            value,
        })
    }
}

fn parse_scores(text: &str, dialogue_id: &str) -> Result<EvaluationScores> {
    let object = extract_json_object(text).ok_or_else(|| Error::ClassifierParse {
        dialogue_id: dialogue_id.to_string(),
        message: "no JSON object in judge response".into(),
    })?;
    let raw: RawScores = serde_json::from_str(object).map_err(|e| Error::ClassifierParse {
        dialogue_id: dialogue_id.to_string(),
        message: e.to_string(),
    })?;
    Ok(EvaluationScores {
        dialogue_id: dialogue_id.to_string(),
        authenticity: checked(METRICS[0], raw.authenticity)?,
        relevance: checked(METRICS[1], raw.relevance)?,
        consistency: checked(METRICS[2], raw.consistency)?,
        efficiency: checked(METRICS[3], raw.efficiency)?,
        human_likeness: checked(METRICS[4], raw.human_likeness)?,
        task_success: raw.task_success,
        rationale: raw.rationale,
    })
}

/// Grade one dialogue. The judge gets one uniform retry on any invalid
/// output (unparseable JSON, missing fields, out-of-range values); the
/// second failure is returned as-is.
pub fn evaluate_dialogue(
    dialogue: &Dialogue,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
) -> Result<EvaluationScores> {
    if dialogue.turns.is_empty() {
        return Err(Error::EmptyInput {
            what: format!("dialogue {} has no completed rounds", dialogue.id),
        });
    }
    let prompt = templates.render_judge(&dialogue.transcript())?;
    let messages = [ChatMessage::user(prompt)];
    let mut last_err = None;
    for _ in 0..2 {
        let response = backend.complete(&messages)?;
        match parse_scores(&response, &dialogue.id) {
            Ok(scores) => return Ok(scores),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("two attempts recorded an error"))
}

/// Grade a collection in order, skipping dialogues with no completed
/// rounds (their ids are returned separately).
pub fn evaluate_collection(
    dialogues: &[Dialogue],
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
) -> Result<(Vec<EvaluationScores>, Vec<String>)> {
    let mut scores = Vec::with_capacity(dialogues.len());
    let mut skipped = Vec::new();
    for dialogue in dialogues {
        if dialogue.turns.is_empty() {
            skipped.push(dialogue.id.clone());
            continue;
        }
        scores.push(evaluate_dialogue(dialogue, backend, templates)?);
    }
    Ok((scores, skipped))
}

/// Where an acceptance rate comes from: either judge verdicts or the
/// `accepted` bit of attitude chains.
#[derive(Debug, Clone, Copy)]
pub enum AcceptanceSource<'a> {
    Judge(&'a [EvaluationScores]),
    Chains(&'a [AttitudeChain]),
}

/// Fraction of dialogues that ended in acceptance/success.
pub fn acceptance_rate(source: AcceptanceSource<'_>) -> Result<f64> {
    let (accepted, total) = match source {
        AcceptanceSource::Judge(scores) => (
            scores.iter().filter(|s| s.task_success).count(),
            scores.len(),
        ),
        AcceptanceSource::Chains(chains) => (
            chains.iter().filter(|c| c.accepted).count(),
            chains.len(),
        ),
    };
    if total == 0 {
        return Err(Error::EmptyInput {
            what: "acceptance-rate inputs".into(),
        });
    }
    Ok(accepted as f64 / total as f64)
}

/// Corpus filtering policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterPolicy {
    /// Minimum mean graded score to keep a dialogue.
    pub min_mean: f64,
    /// Keep at most this fraction of the collection, best-scored first.
    pub quantile: f64,
    /// Drop dialogues the judge marked unsuccessful.
    pub require_success: bool,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            min_mean: 2.0,
            quantile: 1.0,
            require_success: false,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.quantile > 0.0 && self.quantile <= 1.0) {
            return Err(Error::InvalidConfig {
                message: format!("quantile must be in (0, 1], got {}", self.quantile),
            });
        }
        if !(0.0..=MAX_SCORE as f64).contains(&self.min_mean) {
            return Err(Error::InvalidConfig {
                message: format!(
                    "min_mean must be in [0, {MAX_SCORE}], got {}",
                    self.min_mean
                ),
            });
        }
        Ok(())
    }
}

/// Keep the ids of dialogues that clear the policy: within the top
/// `quantile` by mean score (ties broken by id so the cut is
/// deterministic), at or above `min_mean`, and successful when required.
/// Every dialogue must have a score.
pub fn filter_corpus(
    dialogues: &[Dialogue],
    scores: &[EvaluationScores],
    policy: &FilterPolicy,
) -> Result<Vec<String>> {
    policy.validate()?;
    let by_id: BTreeMap<&str, &EvaluationScores> =
        scores.iter().map(|s| (s.dialogue_id.as_str(), s)).collect();
    let mut ranked: Vec<(&str, &EvaluationScores)> = Vec::with_capacity(dialogues.len());
    for dialogue in dialogues {
        let score = by_id
            .get(dialogue.id.as_str())
            .ok_or_else(|| Error::MissingScore {
                dialogue_id: dialogue.id.clone(),
            })?;
        ranked.push((dialogue.id.as_str(), score));
    }
    ranked.sort_by(|(id_a, a), (id_b, b)| {
        b.mean()
            .total_cmp(&a.mean())
            .then_with(|| id_a.cmp(id_b))
    });
    let n = ranked.len() as f64;
    let mut kept = Vec::new();
    for (rank0, (id, score)) in ranked.iter().enumerate() {
        // rank is 1-based; the epsilon absorbs float slop in quantile * n.
        if (rank0 + 1) as f64 > policy.quantile * n + 1e-9 {
            break;
        }
        if score.mean() < policy.min_mean {
            continue;
        }
        if policy.require_success && !score.task_success {
            continue;
        }
        kept.push(id.to_string());
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ScriptedBackend;
    use crate::engine::{Termination, Turn, UtteranceMeta};
    use proptest::prelude::*;

    fn dialogue(id: &str, rounds: u32) -> Dialogue {
        let meta = UtteranceMeta {
            model: "m".into(),
            latency_ms: 0,
            at_ms: 0,
        };
        Dialogue {
            id: id.into(),
            persona_id: "p".into(),
            prompt_version_id: "v".into(),
            scenario: "s".into(),
            turns: (1..=rounds)
                .map(|i| Turn {
                    index: i,
                    assistant_text: "a".into(),
                    user_text: "u".into(),
                    assistant_meta: meta.clone(),
                    user_meta: meta.clone(),
                })
                .collect(),
            termination: Termination::Completed,
        }
    }

    fn verdict(values: [i64; 5], success: bool) -> String {
        serde_json::json!({
            "authenticity": values[0],
            "relevance": values[1],
            "consistency": values[2],
            "efficiency": values[3],
            "human_likeness": values[4],
            "task_success": success,
            "rationale": {"authenticity": "sounds like a person"}
        })
        .to_string()
    }

    fn scores(id: &str, values: [u8; 5], success: bool) -> EvaluationScores {
        EvaluationScores {
            dialogue_id: id.into(),
            authenticity: values[0],
            relevance: values[1],
            consistency: values[2],
            efficiency: values[3],
            human_likeness: values[4],
            task_success: success,
            rationale: BTreeMap::new(),
        }
    }

    #[test]
    fn judge_response_parses_including_rationale() {
        let backend = ScriptedBackend::constant(format!(
            "Here is my evaluation:\n{}",
            verdict([3, 2, 3, 1, 2], true)
        ));
        let result =
            evaluate_dialogue(&dialogue("d1", 2), &backend, &TemplateSet::builtin()).unwrap();
        assert_eq!(result.dialogue_id, "d1");
        assert_eq!(result.graded().map(|(_, v)| v), [3, 2, 3, 1, 2]);
        assert!(result.task_success);
        assert!((result.mean() - 2.2).abs() < 1e-12);
        assert_eq!(
            result.rationale.get("authenticity").map(String::as_str),
            Some("sounds like a person")
        );
    }

    #[test]
    fn invalid_verdict_gets_one_retry() {
        let backend =
            ScriptedBackend::from_queue(["not json at all".to_string(), verdict([2; 5], false)]);
        let result =
            evaluate_dialogue(&dialogue("d1", 1), &backend, &TemplateSet::builtin()).unwrap();
        assert_eq!(result.mean(), 2.0);
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn out_of_range_score_fails_after_retry() {
        let bad = verdict([2, 2, 5, 2, 2], true);
        let backend = ScriptedBackend::from_queue([bad.clone(), bad]);
        let err = evaluate_dialogue(&dialogue("d1", 1), &backend, &TemplateSet::builtin())
            .unwrap_err();
        match err {
            Error::ScoreOutOfRange { metric, value } => {
                assert_eq!((metric.as_str(), value), ("consistency", 5));
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn missing_task_success_is_a_parse_error() {
        let bad = r#"{"authenticity":2,"relevance":2,"consistency":2,"efficiency":2,"human_likeness":2}"#;
        let backend = ScriptedBackend::from_queue([bad.to_string(), bad.to_string()]);
        let err = evaluate_dialogue(&dialogue("d1", 1), &backend, &TemplateSet::builtin())
            .unwrap_err();
        assert!(matches!(err, Error::ClassifierParse { .. }));
    }

    #[test]
    fn empty_dialogue_rejected_before_any_call() {
        let backend = ScriptedBackend::constant("unused");
        let err = evaluate_dialogue(&dialogue("d0", 0), &backend, &TemplateSet::builtin())
            .unwrap_err();
        assert!(matches!(err, Error::EmptyInput { .. }));
        assert_eq!(backend.calls(), 0);
    }

    #[test]
    fn collection_evaluation_skips_empty_dialogues() {
        let backend = ScriptedBackend::constant(verdict([3; 5], true));
        let dialogues = vec![dialogue("d1", 1), dialogue("d2", 0), dialogue("d3", 2)];
        let (scores, skipped) =
            evaluate_collection(&dialogues, &backend, &TemplateSet::builtin()).unwrap();
        assert_eq!(scores.len(), 2);
        assert_eq!(skipped, vec!["d2"]);
    }

    #[test]
    fn acceptance_rate_counts_successes_and_accepted_chains() {
        let judged = vec![
            scores("a", [2; 5], true),
            scores("b", [2; 5], false),
            scores("c", [2; 5], true),
            scores("d", [2; 5], true),
        ];
        assert!((acceptance_rate(AcceptanceSource::Judge(&judged)).unwrap() - 0.75).abs() < 1e-12);

        let chains = vec![
            AttitudeChain {
                dialogue_id: "a".into(),
                states: vec![0, 1],
                accepted: true,
            },
            AttitudeChain {
                dialogue_id: "b".into(),
                states: vec![0],
                accepted: false,
            },
        ];
        assert!((acceptance_rate(AcceptanceSource::Chains(&chains)).unwrap() - 0.5).abs() < 1e-12);

        assert!(matches!(
            acceptance_rate(AcceptanceSource::Judge(&[])).unwrap_err(),
            Error::EmptyInput { .. }
        ));
    }

    #[test]
    fn concatenated_corpora_average_by_weight() {
        let a = vec![scores("a1", [2; 5], true), scores("a2", [2; 5], true)];
        let b = vec![
            scores("b1", [2; 5], false),
            scores("b2", [2; 5], false),
            scores("b3", [2; 5], true),
        ];
        let rate_a = acceptance_rate(AcceptanceSource::Judge(&a)).unwrap();
        let rate_b = acceptance_rate(AcceptanceSource::Judge(&b)).unwrap();
        let all: Vec<EvaluationScores> = a.iter().chain(b.iter()).cloned().collect();
        let combined = acceptance_rate(AcceptanceSource::Judge(&all)).unwrap();
        let weighted = (rate_a * a.len() as f64 + rate_b * b.len() as f64) / all.len() as f64;
        assert!((combined - weighted).abs() < 1e-12);
    }

    #[test]
    fn filter_keeps_top_quantile_by_mean_then_id() {
        let dialogues: Vec<Dialogue> =
            ["d1", "d2", "d3", "d4"].iter().map(|id| dialogue(id, 1)).collect();
        let all_scores = vec![
            scores("d1", [3, 3, 3, 3, 3], true), // mean 3.0
            scores("d2", [1, 1, 1, 1, 1], true), // mean 1.0
            scores("d3", [2, 2, 2, 2, 2], true), // mean 2.0
            scores("d4", [2, 2, 2, 2, 2], true), // mean 2.0, tie with d3
        ];
        let policy = FilterPolicy {
            min_mean: 0.0,
            quantile: 0.5,
            require_success: false,
        };
        let kept = filter_corpus(&dialogues, &all_scores, &policy).unwrap();
        assert_eq!(kept, vec!["d1", "d3"], "tie at 2.0 broken by id, top half kept");
    }

    #[test]
    fn filter_applies_floor_and_success_requirements() {
        let dialogues: Vec<Dialogue> =
            ["d1", "d2", "d3"].iter().map(|id| dialogue(id, 1)).collect();
        let all_scores = vec![
            scores("d1", [3; 5], false),
            scores("d2", [2; 5], true),
            scores("d3", [1; 5], true),
        ];
        let policy = FilterPolicy {
            min_mean: 2.0,
            quantile: 1.0,
            require_success: true,
        };
        let kept = filter_corpus(&dialogues, &all_scores, &policy).unwrap();
        assert_eq!(kept, vec!["d2"], "d1 unsuccessful, d3 below floor");
    }

    #[test]
    fn filter_demands_full_score_coverage() {
        let dialogues = vec![dialogue("d1", 1), dialogue("d2", 1)];
        let all_scores = vec![scores("d1", [2; 5], true)];
        let err = filter_corpus(&dialogues, &all_scores, &FilterPolicy::default()).unwrap_err();
        match err {
            Error::MissingScore { dialogue_id } => assert_eq!(dialogue_id, "d2"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn filter_policy_validation() {
        let bad_q = FilterPolicy {
            quantile: 0.0,
            ..FilterPolicy::default()
        };
        assert!(bad_q.validate().is_err());
        let bad_mean = FilterPolicy {
            min_mean: 3.5,
            ..FilterPolicy::default()
        };
        assert!(bad_mean.validate().is_err());
        assert!(FilterPolicy::default().validate().is_ok());
    }

    proptest! {
        /// Raising the quantile never drops a previously kept dialogue, and
        /// everything kept clears the floor.
        #[test]
        fn filter_is_monotone_in_quantile(
            grades in proptest::collection::vec(
                (0u8..=3, 0u8..=3, 0u8..=3, 0u8..=3, 0u8..=3, any::<bool>()),
                1..20,
            ),
            q1 in 0.05f64..1.0,
            delta in 0.0f64..0.5,
            min_mean in 0.0f64..3.0,
        ) {
            let q2 = (q1 + delta).min(1.0);
            let dialogues: Vec<Dialogue> = (0..grades.len())
                .map(|i| dialogue(&format!("d{i:03}"), 1))
                .collect();
            let all_scores: Vec<EvaluationScores> = grades
                .iter()
                .enumerate()
                .map(|(i, &(a, b, c, d, e, ok))| {
                    scores(&format!("d{i:03}"), [a, b, c, d, e], ok)
                })
                .collect();
            let policy = |q: f64| FilterPolicy { min_mean, quantile: q, require_success: false };
            let kept1 = filter_corpus(&dialogues, &all_scores, &policy(q1)).unwrap();
            let kept2 = filter_corpus(&dialogues, &all_scores, &policy(q2)).unwrap();
            for id in &kept1 {
                prop_assert!(kept2.contains(id), "{id} kept at q={q1} but lost at q={q2}");
            }
            let by_id: BTreeMap<&str, &EvaluationScores> =
                all_scores.iter().map(|s| (s.dialogue_id.as_str(), s)).collect();
            for id in &kept2 {
                prop_assert!(by_id[id.as_str()].mean() >= min_mean);
            }
            // quantile bounds the kept count
            let cap = (q2 * grades.len() as f64 + 1e-9).floor() as usize;
            prop_assert!(kept2.len() <= cap.max(1));
        }
    }
}
