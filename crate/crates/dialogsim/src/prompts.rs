//! Prompt templates and rendering.
//!
//! Six templates drive the whole pipeline: the two conversation agents
//! (user side and dialog side), the attitude-chain classifier, the
//! strategy classifier, the prompt optimizer, and the quality judge.
//! Built-in template text ships with the crate; any template can be
//! overridden from a directory as long as it keeps the placeholders its
//! operation requires.
//!
//! Placeholder handling is strict and single-pass: `{name}` markers are
//! substituted only for the documented placeholder names below, values are
//! never re-scanned (so dialogue text can't inject further substitutions),
//! and any other `{...}` text — JSON examples, format descriptions — passes
//! through verbatim.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persona::{StateSpace, UserPersona};
use crate::util::{sha256_hex, short_digest};

/// Every placeholder name the renderer will substitute. Anything else in
/// braces is literal template text.
pub const PLACEHOLDERS: [&str; 9] = [
    "user_profile",
    "business_attributes",
    "personality_traits",
    "product_metadata",
    "prompt_k",
    "attitude_description",
    "strategy_description",
    "dialog_history",
    "background",
];

/// The six template slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    UserAgent,
    DialogAgent,
    CoaClassifier,
    P4gClassifier,
    Optimizer,
    Judge,
}

impl TemplateName {
    pub const ALL: [TemplateName; 6] = [
        TemplateName::UserAgent,
        TemplateName::DialogAgent,
        TemplateName::CoaClassifier,
        TemplateName::P4gClassifier,
        TemplateName::Optimizer,
        TemplateName::Judge,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TemplateName::UserAgent => "user_agent",
            TemplateName::DialogAgent => "dialog_agent",
            TemplateName::CoaClassifier => "coa_classifier",
            TemplateName::P4gClassifier => "p4g_classifier",
            TemplateName::Optimizer => "optimizer",
            TemplateName::Judge => "judge",
        }
    }

    /// Placeholders this template's render operation depends on. A template
    /// body missing one of these cannot fulfil its contract.
    fn required(&self) -> &'static [&'static str] {
        match self {
            TemplateName::UserAgent => &["user_profile"],
            TemplateName::DialogAgent => &["product_metadata", "prompt_k"],
            TemplateName::CoaClassifier => &["attitude_description", "dialog_history"],
            TemplateName::P4gClassifier => &["strategy_description", "dialog_history"],
            TemplateName::Optimizer => &["background", "prompt_k", "dialog_history"],
            TemplateName::Judge => &["dialog_history"],
        }
    }

    fn builtin_body(&self) -> &'static str {
        match self {
            TemplateName::UserAgent => include_str!("../assets/templates/user_agent.txt"),
            TemplateName::DialogAgent => include_str!("../assets/templates/dialog_agent.txt"),
            TemplateName::CoaClassifier => include_str!("../assets/templates/coa_classifier.txt"),
            TemplateName::P4gClassifier => include_str!("../assets/templates/p4g_classifier.txt"),
            TemplateName::Optimizer => include_str!("../assets/templates/optimizer.txt"),
            TemplateName::Judge => include_str!("../assets/templates/judge.txt"),
        }
    }
}

impl std::fmt::Display for TemplateName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A template body bound to its slot.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: String,
}

impl PromptTemplate {
    fn validate(&self) -> Result<()> {
        for required in self.name.required() {
            if !self.body.contains(&format!("{{{required}}}")) {
                return Err(Error::MissingPlaceholder {
                    template: self.name.to_string(),
                    placeholder: (*required).to_string(),
                });
            }
        }
        Ok(())
    }
}

/// The full set of templates used by a run.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateName, PromptTemplate>,
}

impl TemplateSet {
    /// The templates shipped with the crate.
    pub fn builtin() -> Self {
        let templates = TemplateName::ALL
            .into_iter()
            .map(|name| {
                let t = PromptTemplate {
                    name,
                    body: name.builtin_body().to_string(),
                };
                t.validate().expect("builtin templates are valid");
                (name, t)
            })
            .collect();
        TemplateSet { templates }
    }

    /// Built-in templates with any file named `<slot>.txt` in `dir`
    /// replacing that slot. Overrides are validated against the slot's
    /// required placeholders at load time.
    pub fn load_dir(dir: impl AsRef<std::path::Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut set = Self::builtin();
        for name in TemplateName::ALL {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let body = std::fs::read_to_string(&path)?;
                let t = PromptTemplate { name, body };
                t.validate()?;
                set.templates.insert(name, t);
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }

    /// Content digests per template, recorded in run manifests so a later
    /// command can detect template drift.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.templates
            .iter()
            .map(|(name, t)| (name.to_string(), sha256_hex(t.body.as_bytes())))
            .collect()
    }

    // -- render operations --------------------------------------------------

    /// System prompt for the persona-conditioned user agent.
    pub fn render_user_agent(&self, persona: &UserPersona) -> Result<String> {
        let mut profile_lines = Vec::new();
        let mut business_lines = Vec::new();
        for (key, value) in &persona.attributes {
            let line = format!("{key}: {value}");
            if persona.business_keys.contains(key) {
                business_lines.push(line);
            } else {
                profile_lines.push(line);
            }
        }
        let template = self.get(TemplateName::UserAgent);
        let mut body = template.body.clone();
        let mut bindings = vec![
            ("user_profile", profile_lines.join("\n")),
            ("business_attributes", business_lines.join("\n")),
        ];
        match &persona.signifier {
            Some(signifier) => bindings.push(("personality_traits", signifier.clone())),
            None => body = strip_block(&body, "<personality>", "</personality>"),
        }
        substitute(template.name, &body, &bindings)
    }

    /// System prompt for the dialog (persuader) agent at a given prompt
    /// version. `product_metadata` may be empty; the reference block is
    /// still emitted.
    pub fn render_dialog_agent(
        &self,
        prompt: &PromptVersion,
        product_metadata: &str,
    ) -> Result<String> {
        let template = self.get(TemplateName::DialogAgent);
        substitute(
            template.name,
            &template.body,
            &[
                ("product_metadata", product_metadata.to_string()),
                ("prompt_k", prompt.body.clone()),
            ],
        )
    }

    /// Single-message prompt for the attitude-chain classifier.
    pub fn render_coa_classifier(&self, transcript: &str, space: &StateSpace) -> Result<String> {
        let template = self.get(TemplateName::CoaClassifier);
        substitute(
            template.name,
            &template.body,
            &[
                ("attitude_description", space.description_block()),
                ("dialog_history", transcript.to_string()),
            ],
        )
    }

    /// Single-message prompt for the strategy classifier.
    /// `strategy_table` is the rendered catalog definition table.
    pub fn render_p4g_classifier(&self, transcript: &str, strategy_table: &str) -> Result<String> {
        let template = self.get(TemplateName::P4gClassifier);
        substitute(
            template.name,
            &template.body,
            &[
                ("strategy_description", strategy_table.to_string()),
                ("dialog_history", transcript.to_string()),
            ],
        )
    }

    /// Single-message prompt for the prompt-evolution step. `failed` holds
    /// the transcripts of dialogues that missed the acceptance gate; at
    /// least one is required, separated by labelled dividers when several.
    pub fn render_optimizer(
        &self,
        prompt: &PromptVersion,
        background: &str,
        failed: &[String],
    ) -> Result<String> {
        if failed.is_empty() {
            return Err(Error::EmptyInput {
                what: "failed dialogue transcripts".into(),
            });
        }
        let mut history = String::new();
        for (i, transcript) in failed.iter().enumerate() {
            if failed.len() > 1 {
                history.push_str(&format!("===== Failed dialogue {} =====\n", i + 1));
            }
            history.push_str(transcript);
            if !transcript.ends_with('\n') {
                history.push('\n');
            }
        }
        let template = self.get(TemplateName::Optimizer);
        substitute(
            template.name,
            &template.body,
            &[
                ("background", background.to_string()),
                ("prompt_k", prompt.body.clone()),
                ("dialog_history", history),
            ],
        )
    }

    /// Single-message prompt for the rubric judge.
    pub fn render_judge(&self, transcript: &str) -> Result<String> {
        let template = self.get(TemplateName::Judge);
        substitute(
            template.name,
            &template.body,
            &[("dialog_history", transcript.to_string())],
        )
    }
}

/// Single-pass placeholder substitution. Documented names must have a
/// binding if they occur; unknown brace contents pass through untouched;
/// substituted values are emitted verbatim and never re-scanned.
fn substitute(name: TemplateName, body: &str, bindings: &[(&str, String)]) -> Result<String> {
    for required in name.required() {
        if !bindings.iter().any(|(k, _)| k == required) && body.contains(&format!("{{{required}}}"))
        {
            return Err(Error::UnresolvedPlaceholder {
                template: name.to_string(),
                placeholder: (*required).to_string(),
            });
        }
    }
    let mut out = String::with_capacity(body.len());
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open..];
        match after.find('}') {
            Some(close) => {
                let marker = &after[1..close];
                if PLACEHOLDERS.contains(&marker) {
                    match bindings.iter().find(|(k, _)| *k == marker) {
                        Some((_, value)) => out.push_str(value),
                        None => {
                            return Err(Error::UnresolvedPlaceholder {
                                template: name.to_string(),
                                placeholder: marker.to_string(),
                            })
                        }
                    }
                } else {
                    out.push_str(&after[..=close]);
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(after);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Remove the lines from the one containing `open` through the one
/// containing `close`, inclusive. No-op if either tag is absent.
fn strip_block(body: &str, open: &str, close: &str) -> String {
    let (Some(open_at), Some(close_at)) = (body.find(open), body.find(close)) else {
        return body.to_string();
    };
    if close_at < open_at {
        return body.to_string();
    }
    let start = body[..open_at].rfind('\n').map(|i| i + 1).unwrap_or(0);
    let end = body[close_at..]
        .find('\n')
        .map(|i| close_at + i + 1)
        .unwrap_or(body.len());
    format!("{}{}", &body[..start], &body[end..])
}

/// One version of the persuader's task prompt (the evolving part of the
/// dialog agent's system prompt). Versions form a chain: the initial
/// version has iteration 0 and no parent; every evolution step bumps the
/// iteration and records its parent and the digest of the feedback that
/// produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptVersion {
    pub id: String,
    pub iteration: u32,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_digest: Option<String>,
}

impl PromptVersion {
    fn id_for(iteration: u32, body: &str) -> String {
        format!("p{iteration:02}-{}", short_digest(body.as_bytes()))
    }

    /// The seed prompt, iteration 0.
    pub fn initial(body: impl Into<String>) -> Self {
        let body = body.into();
        PromptVersion {
            id: Self::id_for(0, &body),
            iteration: 0,
            body,
            parent: None,
            feedback_digest: None,
        }
    }

    /// The next version in the chain, produced from feedback on `parent`.
    pub fn evolved(parent: &PromptVersion, body: impl Into<String>, feedback_digest: String) -> Self {
        let body = body.into();
        let iteration = parent.iteration + 1;
        PromptVersion {
            id: Self::id_for(iteration, &body),
            iteration,
            body,
            parent: Some(parent.id.clone()),
            feedback_digest: Some(feedback_digest),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persona::{sample_personas, PersonaGroup, PersonaSpec};
    use crate::persona::default_state_space;
    use indexmap::IndexMap;
    use proptest::prelude::*;

    fn persona_with(
        attrs: &[(&str, &str)],
        business_keys: &[&str],
        signifier: Option<&str>,
    ) -> UserPersona {
        let mut attributes = IndexMap::new();
        for (k, v) in attrs {
            attributes.insert(
                k.to_string(),
                crate::persona::AttrValue::Text(v.to_string()),
            );
        }
        UserPersona {
            id: "u-test-0000".into(),
            group: PersonaGroup::Custom,
            attributes,
            business_keys: business_keys.iter().map(|s| s.to_string()).collect(),
            signifier: signifier.map(|s| s.to_string()),
            seed: 0,
        }
    }

    #[test]
    fn user_agent_renders_profile_and_personality() {
        let templates = TemplateSet::builtin();
        let persona = persona_with(
            &[("name", "Alex Chen"), ("occupation", "teacher"), ("health_status", "Healthy")],
            &["health_status"],
            Some("Scorpio"),
        );
        let prompt = templates.render_user_agent(&persona).unwrap();
        assert!(prompt.contains("name: Alex Chen"));
        assert!(prompt.contains("occupation: teacher"));
        assert!(prompt.contains("health_status: Healthy"));
        assert!(prompt.contains("Scorpio personality traits"));
        assert!(prompt.contains("[END_CALL]"));
        assert!(prompt.trim_end().ends_with("Start the task!"));
        // business attributes render after the demographic profile
        assert!(prompt.find("name: Alex Chen").unwrap() < prompt.find("health_status:").unwrap());
    }

    #[test]
    fn user_agent_without_signifier_drops_personality_block() {
        let templates = TemplateSet::builtin();
        let persona = persona_with(&[("name", "Sam")], &[], None);
        let prompt = templates.render_user_agent(&persona).unwrap();
        assert!(!prompt.contains("<personality>"));
        assert!(!prompt.contains("personality traits"));
        assert!(prompt.contains("name: Sam"));
    }

    #[test]
    fn dialog_agent_wraps_prompt_version_and_metadata() {
        let templates = TemplateSet::builtin();
        let prompt = PromptVersion::initial("Sell the premium plan politely.");
        let rendered = templates
            .render_dialog_agent(&prompt, "plan: premium\nprice: $99")
            .unwrap();
        assert!(rendered.contains("<reference_information>"));
        assert!(rendered.contains("price: $99"));
        assert!(rendered.contains("Sell the premium plan politely."));
        assert!(rendered.trim_end().ends_with("Start the task!"));
        // empty metadata keeps the block present
        let rendered = templates.render_dialog_agent(&prompt, "").unwrap();
        assert!(rendered.contains("<reference_information>"));
    }

    #[test]
    fn classifier_prompts_embed_space_and_transcript() {
        let templates = TemplateSet::builtin();
        let space = default_state_space();
        let transcript = "Round 1\nAssistant: Hello!\nUser: Not interested.\n";
        let rendered = templates.render_coa_classifier(transcript, &space).unwrap();
        assert!(rendered.contains("Refusal"));
        assert!(rendered.contains("Weighing Options"));
        assert!(rendered.contains("Not interested."));
        // the JSON example braces survive rendering untouched
        assert!(rendered.contains("\"attitudes\""));

        let rendered = templates
            .render_p4g_classifier(transcript, "logical_appeal | Logical Appeal | ...")
            .unwrap();
        assert!(rendered.contains("logical_appeal"));
        assert!(rendered.contains("total_strategies"));
    }

    #[test]
    fn judge_prompt_embeds_transcript_and_rubric() {
        let templates = TemplateSet::builtin();
        let rendered = templates.render_judge("Round 1\nAssistant: hi\nUser: hi\n").unwrap();
        assert!(rendered.contains("authenticity"));
        assert!(rendered.contains("task_success"));
        assert!(rendered.contains("Assistant: hi"));
    }

    #[test]
    fn optimizer_prompt_requires_failures_and_labels_them() {
        let templates = TemplateSet::builtin();
        let prompt = PromptVersion::initial("Sell.");
        let err = templates.render_optimizer(&prompt, "bg", &[]).unwrap_err();
        assert!(matches!(err, Error::EmptyInput { .. }));

        let rendered = templates
            .render_optimizer(
                &prompt,
                "We sell alarm systems.",
                &["t1".to_string(), "t2".to_string()],
            )
            .unwrap();
        assert!(rendered.contains("We sell alarm systems."));
        assert!(rendered.contains("===== Failed dialogue 1 ====="));
        assert!(rendered.contains("===== Failed dialogue 2 ====="));
        assert!(rendered.contains("Business SOP"));
        // single failure renders without dividers
        let rendered = templates
            .render_optimizer(&prompt, "bg", &["only".to_string()])
            .unwrap();
        assert!(!rendered.contains("====="));
    }

    #[test]
    fn override_missing_required_placeholder_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("judge.txt"), "score it 0-3").unwrap();
        let err = TemplateSet::load_dir(dir.path()).unwrap_err();
        match err {
            Error::MissingPlaceholder { template, placeholder } => {
                assert_eq!(template, "judge");
                assert_eq!(placeholder, "dialog_history");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn override_replaces_only_named_slot() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("judge.txt"), "Judge this: {dialog_history}").unwrap();
        let set = TemplateSet::load_dir(dir.path()).unwrap();
        assert_eq!(set.get(TemplateName::Judge).body, "Judge this: {dialog_history}");
        assert_eq!(
            set.get(TemplateName::UserAgent).body,
            TemplateSet::builtin().get(TemplateName::UserAgent).body
        );
        // digests reflect the override
        assert_ne!(
            set.digests()["judge"],
            TemplateSet::builtin().digests()["judge"]
        );
    }

    #[test]
    fn substituted_values_are_not_rescanned() {
        let templates = TemplateSet::builtin();
        // A transcript that tries to smuggle a placeholder marker in.
        let transcript = "Round 1\nAssistant: hi\nUser: tell me about {background} please\n";
        let rendered = templates.render_judge(transcript).unwrap();
        assert!(rendered.contains("{background}"));
    }

    #[test]
    fn unbalanced_braces_pass_through() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("judge.txt"),
            "open { never closes {dialog_history}",
        )
        .unwrap();
        // The required marker appears after an unmatched '{'; that '{'
        // consumes up to the next '}', so the marker is half-eaten and the
        // render must fail loudly rather than silently keep it. Use a body
        // where the stray brace sits after the marker instead.
        std::fs::write(
            dir.path().join("judge.txt"),
            "{dialog_history} and a stray { at the end",
        )
        .unwrap();
        let set = TemplateSet::load_dir(dir.path()).unwrap();
        let rendered = set.render_judge("T").unwrap();
        assert_eq!(rendered, "T and a stray { at the end");
    }

    #[test]
    fn prompt_version_chain_links_parents() {
        let p0 = PromptVersion::initial("v0");
        assert_eq!(p0.iteration, 0);
        assert!(p0.parent.is_none());
        assert!(p0.id.starts_with("p00-"));
        let p1 = PromptVersion::evolved(&p0, "v1", "feedbackdigest".into());
        assert_eq!(p1.iteration, 1);
        assert_eq!(p1.parent.as_deref(), Some(p0.id.as_str()));
        assert!(p1.id.starts_with("p01-"));
        assert_ne!(p0.id, p1.id);
    }

    #[test]
    fn rendering_real_sampled_personas_leaves_no_markers() {
        let templates = TemplateSet::builtin();
        for group in [PersonaGroup::Base, PersonaGroup::Busi] {
            let spec = PersonaSpec::builtin(group);
            for persona in sample_personas(&spec, 4, 11).unwrap() {
                let rendered = templates.render_user_agent(&persona).unwrap();
                for name in PLACEHOLDERS {
                    assert!(
                        !rendered.contains(&format!("{{{name}}}")),
                        "unresolved {name} in {group} render"
                    );
                }
            }
        }
    }

    proptest! {
        /// Distinct attribute maps must render to distinct user prompts.
        /// Keys and values here are "sane": no newlines, keys without
        /// colons — which is what attribute specs produce in practice.
        #[test]
        fn user_agent_render_is_injective(
            a in proptest::collection::btree_map("[a-z_]{1,10}", "[ -9;-~]{0,12}", 1..5),
            b in proptest::collection::btree_map("[a-z_]{1,10}", "[ -9;-~]{0,12}", 1..5),
        ) {
            let templates = TemplateSet::builtin();
            let to_persona = |m: &std::collections::BTreeMap<String, String>| {
                let mut attributes = IndexMap::new();
                for (k, v) in m {
                    attributes.insert(k.clone(), crate::persona::AttrValue::Text(v.clone()));
                }
                UserPersona {
                    id: "u-prop-0000".into(),
                    group: PersonaGroup::Custom,
                    attributes,
                    business_keys: vec![],
                    signifier: None,
                    seed: 0,
                }
            };
            let ra = templates.render_user_agent(&to_persona(&a)).unwrap();
            let rb = templates.render_user_agent(&to_persona(&b)).unwrap();
            prop_assert_eq!(a == b, ra == rb);
        }
    }
}
