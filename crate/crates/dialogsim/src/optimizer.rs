//! The closed-loop prompt optimizer.
//!
//! Each iteration simulates a dialogue batch with the current dialog-agent
//! prompt, measures two things — the acceptance rate τ and the mean
//! attitude-transition entropy — and checks them against a target rate θ
//! and a baseline entropy floor. A batch that clears both gates ends the
//! loop early. A batch that fails feeds its worst dialogues back into an
//! evolution model that rewrites the prompt, and the loop continues; the
//! rewrite also happens after the final failed iteration so an exhausted
//! run still hands back its best-informed prompt. The entropy floor exists
//! to catch over-persuasion: a prompt that "wins" every dialogue by
//! railroading the simulated users collapses attitude diversity below what
//! plain demographic personas produce, and must not count as success.

use serde::{Deserialize, Serialize};

use crate::backends::{ChatBackend, ChatMessage};
use crate::coa::{classify_collection, coa_report, estimate_transitions};
use crate::engine::{run_simulation, BackendPair, Dialogue, SimulationJob, DEFAULT_EXIT_MARKER};
use crate::error::{Error, Result};
use crate::judge::{acceptance_rate, evaluate_collection, AcceptanceSource};
use crate::persona::{
    default_state_space, sample_personas, PersonaGroup, PersonaSpec, StateSpace, UserPersona,
};
use crate::prompts::{PromptVersion, TemplateSet};
use crate::store::RunDirectory;
use crate::util::short_digest;

/// Section heading every evolved prompt must contain; the evolution
/// template demands the rewrite arrives as a stepwise SOP under it.
pub const REQUIRED_SECTION: &str = "Business SOP";

/// Seed salt for the baseline control batch so it never collides with the
/// optimization batches.
const BASELINE_SEED_SALT: u64 = 0xBA5E;

/// What counts as an accepted dialogue when computing τ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcceptanceKind {
    /// The `accepted` verdict of the attitude classifier.
    #[default]
    Chains,
    /// The `task_success` verdict of the judge.
    Judge,
}

fn default_max_iterations() -> u32 {
    5
}
fn default_target_rate() -> f64 {
    0.8
}
fn default_rounds() -> u32 {
    8
}
fn default_persona_count() -> usize {
    8
}
fn default_per_persona() -> u32 {
    1
}
fn default_parallelism() -> usize {
    4
}
fn default_feedback_cap() -> usize {
    5
}
fn default_margin() -> f64 {
    0.15
}
fn default_scenario() -> String {
    "sales-call".into()
}
fn default_exit_marker() -> String {
    DEFAULT_EXIT_MARKER.into()
}

/// Full configuration of an optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationConfig {
    /// Iteration budget K.
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u32,
    /// Acceptance-rate target θ in (0, 1].
    #[serde(default = "default_target_rate")]
    pub target_rate: f64,
    /// Entropy floor. When absent it is measured from a control batch of
    /// plain-demographics personas before the loop starts.
    #[serde(default)]
    pub baseline_entropy: Option<f64>,
    /// Round budget per dialogue.
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    /// Builtin persona group name (`base`, `sign`, `mbti`, `busi`) or a
    /// path to a persona spec file.
    pub persona_spec: String,
    #[serde(default = "default_persona_count")]
    pub persona_count: usize,
    #[serde(default = "default_per_persona")]
    pub dialogues_per_persona: u32,
    #[serde(default)]
    pub seed: u64,
    /// The starting dialog-agent task prompt.
    pub initial_prompt: String,
    /// Business background handed to the evolution model.
    #[serde(default)]
    pub background: String,
    /// Product metadata rendered into dialog-agent system prompts.
    #[serde(default)]
    pub product_metadata: String,
    #[serde(default = "default_scenario")]
    pub scenario: String,
    #[serde(default)]
    pub acceptance_source: AcceptanceKind,
    /// At most this many failed-dialogue transcripts go into one evolution
    /// request, longest first.
    #[serde(default = "default_feedback_cap")]
    pub feedback_cap: usize,
    /// How far τ may exceed θ while entropy sits below baseline before the
    /// iteration is flagged as over-persuasion.
    #[serde(default = "default_margin")]
    pub over_persuasion_margin: f64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_exit_marker")]
    pub exit_marker: String,
    /// Optional path to a custom attitude state space.
    #[serde(default)]
    pub state_space: Option<String>,
}

/// Resolve a builtin persona group name or spec-file path.
pub fn resolve_persona_spec(source: &str) -> Result<PersonaSpec> {
    let group = match source {
        "base" => Some(PersonaGroup::Base),
        "sign" => Some(PersonaGroup::Sign),
        "mbti" => Some(PersonaGroup::Mbti),
        "busi" => Some(PersonaGroup::Busi),
        _ => None,
    };
    match group {
        Some(group) => Ok(PersonaSpec::builtin(group)),
        None => PersonaSpec::load(source),
    }
}

impl OptimizationConfig {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let config: OptimizationConfig = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Err(Error::InvalidConfig { message });
        if self.max_iterations == 0 {
            return fail("max_iterations must be at least 1".into());
        }
        if !(self.target_rate > 0.0 && self.target_rate <= 1.0) {
            return fail(format!(
                "target_rate must be in (0, 1], got {}",
                self.target_rate
            ));
        }
        if let Some(h) = self.baseline_entropy {
            if h.is_nan() || h < 0.0 {
                return fail(format!("baseline_entropy must be non-negative, got {h}"));
            }
        }
        if self.rounds == 0 {
            return fail("rounds must be at least 1".into());
        }
        if self.persona_count == 0 {
            return fail("persona_count must be at least 1".into());
        }
        if self.dialogues_per_persona == 0 {
            return fail("dialogues_per_persona must be at least 1".into());
        }
        if self.feedback_cap == 0 {
            return fail("feedback_cap must be at least 1".into());
        }
        if self.over_persuasion_margin.is_nan() || self.over_persuasion_margin < 0.0 {
            return fail(format!(
                "over_persuasion_margin must be non-negative, got {}",
                self.over_persuasion_margin
            ));
        }
        if self.parallelism == 0 {
            return fail("parallelism must be at least 1".into());
        }
        if self.initial_prompt.trim().is_empty() {
            return fail("initial_prompt must not be empty".into());
        }
        if self.exit_marker.is_empty() {
            return fail("exit_marker must not be empty".into());
        }
        Ok(())
    }

    pub fn resolve_spec(&self) -> Result<PersonaSpec> {
        resolve_persona_spec(&self.persona_spec)
    }

    pub fn load_state_space(&self) -> Result<StateSpace> {
        match &self.state_space {
            Some(path) => StateSpace::load(path),
            None => Ok(default_state_space()),
        }
    }

    /// Apply the two-sided gate to one iteration's measurements.
    pub fn gate(&self, tau: f64, entropy: f64, baseline: f64) -> GateResult {
        let tau_ok = tau >= self.target_rate;
        let entropy_ok = entropy >= baseline;
        GateResult {
            tau,
            tau_ok,
            entropy,
            entropy_ok,
            passed: tau_ok && entropy_ok,
            over_persuasion: tau >= self.target_rate + self.over_persuasion_margin && !entropy_ok,
        }
    }

    fn job(&self, personas: Vec<UserPersona>, prompt: PromptVersion, seed: u64) -> SimulationJob {
        let mut job = SimulationJob::new(personas, prompt, self.rounds);
        job.dialogues_per_persona = self.dialogues_per_persona;
        job.seed = seed;
        job.parallelism = self.parallelism;
        job.product_metadata = self.product_metadata.clone();
        job.scenario = self.scenario.clone();
        job.exit_marker = self.exit_marker.clone();
        job
    }
}

/// Outcome of the two-sided gate for one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    /// Acceptance rate of the batch.
    pub tau: f64,
    pub tau_ok: bool,
    /// Mean attitude-transition entropy of the batch.
    pub entropy: f64,
    pub entropy_ok: bool,
    pub passed: bool,
    /// τ cleared the target by the configured margin while entropy sat
    /// below baseline — the signature of a prompt that railroads users.
    pub over_persuasion: bool,
}

/// Durable record of one optimization iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based iteration number.
    pub k: u32,
    /// Prompt version the batch was simulated with.
    pub prompt_version_id: String,
    pub collection_id: String,
    pub gate: GateResult,
    /// Dialogues counted as failures (not accepted, or unclassifiable).
    pub failed_ids: Vec<String>,
    pub note: String,
}

/// The model roles the loop talks to.
pub struct OptimizerBackends<'a> {
    pub user: &'a dyn ChatBackend,
    pub dialog: &'a dyn ChatBackend,
    pub classifier: &'a dyn ChatBackend,
    pub judge: &'a dyn ChatBackend,
    pub evolution: &'a dyn ChatBackend,
}

impl<'a> OptimizerBackends<'a> {
    /// All five roles served by the same backend.
    pub fn uniform(backend: &'a dyn ChatBackend) -> Self {
        OptimizerBackends {
            user: backend,
            dialog: backend,
            classifier: backend,
            judge: backend,
            evolution: backend,
        }
    }

    fn simulation(&self) -> BackendPair<'a> {
        BackendPair {
            user: self.user,
            dialog: self.dialog,
        }
    }
}

/// What the loop handed back.
#[derive(Debug, Clone)]
pub struct OptimizationOutcome {
    /// True when some iteration passed the gate before the budget ran out.
    pub early_exit: bool,
    /// Iterations executed by this call (excludes resumed history).
    pub iterations_run: u32,
    /// The entropy floor that was enforced (configured or measured).
    pub baseline_entropy: f64,
    /// Final prompt: the passing one on early exit, otherwise the last
    /// evolved version.
    pub final_prompt: PromptVersion,
    /// Collection id of the last simulated batch.
    pub final_collection: String,
    /// Full iteration history, resumed records included.
    pub records: Vec<IterationRecord>,
}

/// Rewrite `prompt` from failed-dialogue feedback. The evolution model must
/// answer with a stepwise plan under a `Business SOP` heading; one invalid
/// answer is retried, a second one is [`Error::EvolutionFailed`].
pub fn evolve_prompt(
    prompt: &PromptVersion,
    background: &str,
    failures: &[String],
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
) -> Result<PromptVersion> {
    let request = templates.render_optimizer(prompt, background, failures)?;
    let messages = [ChatMessage::user(request)];
    for _attempt in 0..2 {
        let response = backend.complete(&messages)?;
        let body = response.trim();
        if !body.is_empty() && body.contains(REQUIRED_SECTION) {
            let digest = short_digest(failures.join("\n").as_bytes());
            return Ok(PromptVersion::evolved(prompt, body, digest));
        }
    }
    Err(Error::EvolutionFailed)
}

/// Measure the entropy floor from a control batch: the configured persona
/// spec stripped to plain demographics, simulated with the initial prompt.
pub fn measure_baseline_entropy(
    config: &OptimizationConfig,
    backends: &OptimizerBackends<'_>,
    templates: &TemplateSet,
    space: &StateSpace,
    run: &RunDirectory,
) -> Result<f64> {
    let spec = config.resolve_spec()?.to_base();
    let seed = config.seed ^ BASELINE_SEED_SALT;
    let personas = sample_personas(&spec, config.persona_count, seed)?;
    let prompt = PromptVersion::initial(&config.initial_prompt);
    let job = config.job(personas, prompt, seed);
    let (collection, dialogues) =
        run_simulation(&job, backends.simulation(), templates, run)?;
    let (chains, _skipped) =
        classify_collection(&dialogues, space, backends.classifier, templates)?;
    if chains.is_empty() {
        return Err(Error::EmptyInput {
            what: format!("classifiable dialogues in control batch {collection}"),
        });
    }
    run.persist_chains(&collection, &chains)?;
    Ok(coa_report(&estimate_transitions(&chains, space)).h_avg)
}

fn config_fingerprint(value: &serde_json::Value) -> serde_json::Value {
    let mut copy = value.clone();
    if let Some(map) = copy.as_object_mut() {
        // The iteration budget may legitimately be raised between resumes.
        map.remove("max_iterations");
    }
    copy
}

fn ensure_resumable(
    config: &OptimizationConfig,
    run: &RunDirectory,
    records: &[IterationRecord],
) -> Result<()> {
    if let Some(passed) = records.iter().find(|r| r.gate.passed) {
        return Err(Error::InvalidConfig {
            message: format!(
                "nothing to resume: the run already passed the gate at iteration {}",
                passed.k
            ),
        });
    }
    if records.len() as u32 >= config.max_iterations {
        return Err(Error::InvalidConfig {
            message: format!(
                "nothing to resume: {} iteration(s) already recorded; raise max_iterations \
                 past {}",
                records.len(),
                config.max_iterations
            ),
        });
    }
    let manifest_config = &run.manifest().config;
    if manifest_config.as_object().is_some_and(|m| !m.is_empty()) {
        let ours = serde_json::to_value(config).expect("config serializes");
        if config_fingerprint(manifest_config) != config_fingerprint(&ours) {
            return Err(Error::InvalidConfig {
                message: "resume configuration differs from the run manifest (only \
                          max_iterations may change between resumes)"
                    .into(),
            });
        }
    }
    Ok(())
}

/// Pick the feedback transcripts for one evolution request: failed
/// dialogues with at least one completed round, longest transcript first,
/// capped.
fn select_feedback(dialogues: &[Dialogue], failed_ids: &[String], cap: usize) -> Vec<String> {
    let mut failed: Vec<(String, &str)> = dialogues
        .iter()
        .filter(|d| !d.turns.is_empty() && failed_ids.iter().any(|id| id == &d.id))
        .map(|d| (d.transcript(), d.id.as_str()))
        .collect();
    failed.sort_by(|(ta, ida), (tb, idb)| tb.len().cmp(&ta.len()).then(ida.cmp(idb)));
    failed.truncate(cap);
    failed.into_iter().map(|(transcript, _)| transcript).collect()
}

/// Run the optimization loop against `run`, resuming its recorded history
/// when `resume` is set. Personas are sampled once (deterministically from
/// the config seed) and reused by every iteration; each iteration gets a
/// distinct simulation seed derived from the iteration number.
pub fn optimize(
    config: &OptimizationConfig,
    backends: &OptimizerBackends<'_>,
    templates: &TemplateSet,
    run: &RunDirectory,
    resume: bool,
) -> Result<OptimizationOutcome> {
    config.validate()?;
    run.verify_templates(templates)?;
    let space = config.load_state_space()?;
    let spec = config.resolve_spec()?;

    let mut records: Vec<IterationRecord> = run.load_iterations()?;
    if resume {
        ensure_resumable(config, run, &records)?;
    } else if !records.is_empty() {
        return Err(Error::InvalidConfig {
            message: "run directory already holds iterations; pass resume to continue it".into(),
        });
    }

    let personas = sample_personas(&spec, config.persona_count, config.seed)?;
    run.record_personas(&personas)?;

    let mut prompt = if resume {
        run.load_prompts()?
            .pop()
            .unwrap_or_else(|| PromptVersion::initial(&config.initial_prompt))
    } else {
        PromptVersion::initial(&config.initial_prompt)
    };
    run.record_prompt(&prompt)?;

    let baseline = match config.baseline_entropy {
        Some(h) => h,
        None => measure_baseline_entropy(config, backends, templates, &space, run)?,
    };

    let start_k = records.len() as u32 + 1;
    let mut iterations_run = 0;
    let mut last_collection: Option<String> = None;

    for k in start_k..=config.max_iterations {
        let job = config.job(
            personas.clone(),
            prompt.clone(),
            config.seed.wrapping_add(k as u64),
        );
        let (collection, dialogues) =
            run_simulation(&job, backends.simulation(), templates, run)?;
        iterations_run += 1;
        last_collection = Some(collection.clone());

        let (chains, skipped) =
            classify_collection(&dialogues, &space, backends.classifier, templates)?;
        run.persist_chains(&collection, &chains)?;
        let entropy = if chains.is_empty() {
            0.0
        } else {
            coa_report(&estimate_transitions(&chains, &space)).h_avg
        };

        let (tau, mut failed_ids) = match config.acceptance_source {
            AcceptanceKind::Chains => {
                if chains.is_empty() {
                    (0.0, Vec::new())
                } else {
                    let tau = acceptance_rate(AcceptanceSource::Chains(&chains))?;
                    let failed = chains
                        .iter()
                        .filter(|c| !c.accepted)
                        .map(|c| c.dialogue_id.clone())
                        .collect();
                    (tau, failed)
                }
            }
            AcceptanceKind::Judge => {
                let (scores, _) =
                    evaluate_collection(&dialogues, backends.judge, templates)?;
                run.persist_scores(&collection, &scores)?;
                if scores.is_empty() {
                    (0.0, Vec::new())
                } else {
                    let tau = acceptance_rate(AcceptanceSource::Judge(&scores))?;
                    let failed = scores
                        .iter()
                        .filter(|s| !s.task_success)
                        .map(|s| s.dialogue_id.clone())
                        .collect();
                    (tau, failed)
                }
            }
        };
        // Dialogues the classifier could not see at all count as failures.
        failed_ids.extend(skipped.iter().cloned());

        let gate = config.gate(tau, entropy, baseline);
        let used_prompt_id = prompt.id.clone();

        if gate.passed {
            let record = IterationRecord {
                k,
                prompt_version_id: used_prompt_id,
                collection_id: collection.clone(),
                gate,
                failed_ids,
                note: "gate passed".into(),
            };
            run.append_iteration(&record)?;
            records.push(record);
            return Ok(OptimizationOutcome {
                early_exit: true,
                iterations_run,
                baseline_entropy: baseline,
                final_prompt: prompt,
                final_collection: collection,
                records,
            });
        }

        // Evolution runs on every failed iteration, the last one included,
        // so an exhausted run still returns its best-informed prompt.
        let mut feedback = select_feedback(&dialogues, &failed_ids, config.feedback_cap);
        let mut batch_feedback = false;
        if feedback.is_empty() {
            // The gate failed without individually failed dialogues — the
            // over-persuasion shape, where τ clears the bar but diversity
            // sits below the floor. The whole batch is the evidence, so
            // feed its longest transcripts instead.
            let all_ids: Vec<String> = dialogues.iter().map(|d| d.id.clone()).collect();
            feedback = select_feedback(&dialogues, &all_ids, config.feedback_cap);
            batch_feedback = true;
        }
        let note = if feedback.is_empty() {
            "no transcripts available as feedback; prompt retained".to_string()
        } else {
            match evolve_prompt(
                &prompt,
                &config.background,
                &feedback,
                backends.evolution,
                templates,
            ) {
                Ok(next) => {
                    run.record_prompt(&next)?;
                    let note = format!(
                        "prompt evolved into {} from {} {} dialogue(s)",
                        next.id,
                        feedback.len(),
                        if batch_feedback {
                            "whole-batch feedback"
                        } else {
                            "failed"
                        }
                    );
                    prompt = next;
                    note
                }
                Err(e) => format!("evolution failed ({e}); prompt retained"),
            }
        };

        let record = IterationRecord {
            k,
            prompt_version_id: used_prompt_id,
            collection_id: collection,
            gate,
            failed_ids,
            note,
        };
        run.append_iteration(&record)?;
        records.push(record);
    }

    Ok(OptimizationOutcome {
        early_exit: false,
        iterations_run,
        baseline_entropy: baseline,
        final_prompt: prompt,
        final_collection: last_collection.expect("at least one iteration ran"),
        records,
    })
}
