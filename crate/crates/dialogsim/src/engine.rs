//! Round-based dialogue self-play.
//!
//! A dialogue is a sequence of rounds between the **dialog agent** (the
//! persuader, who always opens) and the **user agent** (the simulated
//! persona). Each side sees its own system prompt and the shared utterance
//! history mirrored into its own perspective: the other side's words arrive
//! as `user` messages, its own as `assistant` messages. Neither side ever
//! sees the other's system prompt.
//!
//! A dialogue ends when the round budget is reached, when the user agent
//! emits the job's exit marker, or when a backend call fails — in which
//! case the completed rounds are kept and the dialogue is marked
//! accordingly rather than discarded.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backends::{ChatBackend, ChatMessage};
use crate::error::{Error, Result};
use crate::persona::UserPersona;
use crate::prompts::{PromptVersion, TemplateSet};
use crate::store::RunDirectory;
use crate::util::{now_ms, short_digest};

/// Default marker a user agent emits to hang up early.
pub const DEFAULT_EXIT_MARKER: &str = "[END_CALL]";

/// Per-utterance bookkeeping. Excluded from content digests so wall-clock
/// noise never breaks reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceMeta {
    pub model: String,
    pub latency_ms: u64,
    pub at_ms: u64,
}

/// One round: the persuader speaks, the user replies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Turn {
    /// 1-based round number.
    pub index: u32,
    pub assistant_text: String,
    pub user_text: String,
    pub assistant_meta: UtteranceMeta,
    pub user_meta: UtteranceMeta,
}

/// Why a dialogue stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Ran the full round budget.
    Completed,
    /// The user agent emitted the exit marker.
    UserExit,
    /// A backend call failed; completed rounds were kept.
    BackendError,
}

/// A finished (possibly partial) dialogue.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub persona_id: String,
    pub prompt_version_id: String,
    pub scenario: String,
    pub turns: Vec<Turn>,
    pub termination: Termination,
}

impl Dialogue {
    pub fn rounds(&self) -> usize {
        self.turns.len()
    }

    /// Plain-text rendering used by every analysis prompt. Round numbers
    /// here are what classifier outputs refer back to.
    pub fn transcript(&self) -> String {
        let mut out = String::new();
        for turn in &self.turns {
            if turn.index > 1 {
                out.push('\n');
            }
            out.push_str(&format!(
                "Round {}\nAssistant: {}\nUser: {}\n",
                turn.index, turn.assistant_text, turn.user_text
            ));
        }
        out
    }

    /// Digest over semantic content only (ids, texts, termination —
    /// not timestamps or latencies), so reruns of a deterministic job
    /// produce byte-identical values.
    pub fn content_digest(&self) -> String {
        let semantic = (
            &self.id,
            &self.persona_id,
            &self.prompt_version_id,
            &self.scenario,
            self.termination,
            self.turns
                .iter()
                .map(|t| (t.index, t.assistant_text.as_str(), t.user_text.as_str()))
                .collect::<Vec<_>>(),
        );
        short_digest(
            serde_json::to_string(&semantic)
                .expect("dialogue serializes")
                .as_bytes(),
        )
    }
}

/// The two conversation-side backends. They may be the same object.
#[derive(Clone, Copy)]
pub struct BackendPair<'a> {
    pub user: &'a dyn ChatBackend,
    pub dialog: &'a dyn ChatBackend,
}

/// Everything needed to simulate one batch of dialogues.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationJob {
    pub personas: Vec<UserPersona>,
    pub prompt: PromptVersion,
    /// Round budget per dialogue.
    pub rounds: u32,
    pub dialogues_per_persona: u32,
    /// Job seed; recorded in artifacts and forwarded to deterministic
    /// backends by the caller.
    pub seed: u64,
    /// Maximum number of dialogues simulated concurrently.
    pub parallelism: usize,
    pub product_metadata: String,
    /// Free-text tag describing what is being sold/proposed.
    pub scenario: String,
    pub exit_marker: String,
}

impl SimulationJob {
    pub fn new(personas: Vec<UserPersona>, prompt: PromptVersion, rounds: u32) -> Self {
        SimulationJob {
            personas,
            prompt,
            rounds,
            dialogues_per_persona: 1,
            seed: 0,
            parallelism: 4,
            product_metadata: String::new(),
            scenario: "sales-call".into(),
            exit_marker: DEFAULT_EXIT_MARKER.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: &str| {
            Err(Error::InvalidJob {
                message: message.into(),
            })
        };
        if self.personas.is_empty() {
            return fail("no personas");
        }
        if self.rounds == 0 {
            return fail("round budget must be at least 1");
        }
        if self.dialogues_per_persona == 0 {
            return fail("dialogues_per_persona must be at least 1");
        }
        if self.parallelism == 0 {
            return fail("parallelism must be at least 1");
        }
        if self.exit_marker.is_empty() {
            return fail("exit marker must be non-empty");
        }
        Ok(())
    }
}

fn call(backend: &dyn ChatBackend, view: &[ChatMessage]) -> Result<(String, UtteranceMeta)> {
    let started = std::time::Instant::now();
    let text = backend.complete(view)?;
    Ok((
        text,
        UtteranceMeta {
            model: backend.model_name(),
            latency_ms: started.elapsed().as_millis() as u64,
            at_ms: now_ms(),
        },
    ))
}

/// Simulate a single dialogue. Backend failures do not error: the dialogue
/// comes back with its completed rounds and `Termination::BackendError`.
/// Only invalid inputs (zero rounds, template problems) return `Err`.
#[allow(clippy::too_many_arguments)]
pub fn gen_dialogue(
    persona: &UserPersona,
    prompt: &PromptVersion,
    rounds: u32,
    backends: BackendPair<'_>,
    id: impl Into<String>,
    templates: &TemplateSet,
    product_metadata: &str,
    scenario: &str,
    exit_marker: &str,
) -> Result<Dialogue> {
    if rounds == 0 {
        return Err(Error::InvalidJob {
            message: "round budget must be at least 1".into(),
        });
    }
    let user_system = templates.render_user_agent(persona)?;
    let dialog_system = templates.render_dialog_agent(prompt, product_metadata)?;

    // Mirrored perspectives: each agent is the "assistant" of its own view.
    let mut dialog_view = vec![ChatMessage::system(dialog_system)];
    let mut user_view = vec![ChatMessage::system(user_system)];

    let mut dialogue = Dialogue {
        id: id.into(),
        persona_id: persona.id.clone(),
        prompt_version_id: prompt.id.clone(),
        scenario: scenario.to_string(),
        turns: Vec::with_capacity(rounds as usize),
        termination: Termination::Completed,
    };

    for round in 1..=rounds {
        let (assistant_text, assistant_meta) = match call(backends.dialog, &dialog_view) {
            Ok(reply) => reply,
            Err(_) => {
                dialogue.termination = Termination::BackendError;
                break;
            }
        };
        dialog_view.push(ChatMessage::assistant(&assistant_text));
        user_view.push(ChatMessage::user(&assistant_text));

        let (raw_user_text, user_meta) = match call(backends.user, &user_view) {
            Ok(reply) => reply,
            Err(_) => {
                dialogue.termination = Termination::BackendError;
                break;
            }
        };
        let exited = raw_user_text.contains(exit_marker);
        // Strip the control marker from the stored utterance; it is wire
        // protocol, not conversation.
        let user_text = if exited {
            raw_user_text.replace(exit_marker, "").trim_end().to_string()
        } else {
            raw_user_text
        };
        user_view.push(ChatMessage::assistant(&user_text));
        dialog_view.push(ChatMessage::user(&user_text));

        dialogue.turns.push(Turn {
            index: round,
            assistant_text,
            user_text,
            assistant_meta,
            user_meta,
        });

        if exited {
            dialogue.termination = Termination::UserExit;
            break;
        }
    }
    Ok(dialogue)
}

/// Simulate every (persona × repetition) dialogue of `job` on a bounded
/// worker pool, persist the batch as a collection under `run`, and return
/// the collection id with the dialogues in deterministic (task) order.
///
/// Individual backend failures are isolated to their dialogue; only a batch
/// where *every* dialogue failed is an error, and even then the partial
/// collection is persisted first so nothing is lost.
pub fn run_simulation(
    job: &SimulationJob,
    backends: BackendPair<'_>,
    templates: &TemplateSet,
    run: &RunDirectory,
) -> Result<(String, Vec<Dialogue>)> {
    job.validate()?;
    // Render every prompt once up front so template errors surface here,
    // not inside worker threads.
    templates.render_dialog_agent(&job.prompt, &job.product_metadata)?;
    for persona in &job.personas {
        templates.render_user_agent(persona)?;
    }

    let reps = job.dialogues_per_persona as usize;
    let task_count = job.personas.len() * reps;
    let cursor = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Dialogue>>> = Mutex::new(vec![None; task_count]);
    let first_error: Mutex<Option<Error>> = Mutex::new(None);

    let workers = job.parallelism.min(task_count);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let task = cursor.fetch_add(1, Ordering::SeqCst);
                if task >= task_count {
                    break;
                }
                let persona = &job.personas[task / reps];
                let result = gen_dialogue(
                    persona,
                    &job.prompt,
                    job.rounds,
                    backends,
                    format!("d-{task:05}"),
                    templates,
                    &job.product_metadata,
                    &job.scenario,
                    &job.exit_marker,
                );
                match result {
                    Ok(dialogue) => {
                        slots.lock().expect("slot lock")[task] = Some(dialogue);
                    }
                    Err(err) => {
                        let mut first = first_error.lock().expect("error lock");
                        first.get_or_insert(err);
                        break;
                    }
                }
            });
        }
    });

    if let Some(err) = first_error.into_inner().expect("error lock") {
        return Err(err);
    }
    let dialogues: Vec<Dialogue> = slots
        .into_inner()
        .expect("slot lock")
        .into_iter()
        .map(|slot| slot.expect("every task filled"))
        .collect();

    // Persist supporting records first so the collection is always
    // interpretable on disk, then the collection itself.
    run.record_personas(&job.personas)?;
    run.record_prompt(&job.prompt)?;
    let collection_id = run.persist_collection(&dialogues)?;

    let failed = dialogues
        .iter()
        .filter(|d| d.termination == Termination::BackendError)
        .count();
    if failed == task_count {
        return Err(Error::AllDialoguesFailed {
            collection_id,
            count: failed,
        });
    }
    Ok((collection_id, dialogues))
}
