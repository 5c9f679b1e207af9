//! Run directories: durable, append-only storage for everything a run
//! produces.
//!
//! A run directory is a self-describing folder. `manifest.json` freezes the
//! configuration, seed, and template digests the run was started with;
//! personas and prompt versions are recorded once by id; dialogue
//! collections, attitude chains, strategy annotations, and judge scores are
//! content-addressed JSONL artifacts. Artifacts are write-once: persisting
//! identical content again is a no-op, persisting different content under
//! the same address is an error. The same directory also drives fine-tune
//! export and external-corpus ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::coa::AttitudeChain;
use crate::engine::{Dialogue, Termination, Turn, UtteranceMeta};
use crate::error::{Error, Result};
use crate::judge::EvaluationScores;
use crate::persona::UserPersona;
use crate::prompts::{PromptVersion, TemplateSet};
use crate::strategy::StrategyAnnotation;
use crate::util::{now_ms, short_digest};

/// Persona and prompt id used for dialogues that did not originate here.
pub const EXTERNAL_ID: &str = "external";

/// Frozen description of how a run was configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub created_ms: u64,
    pub tool_version: String,
    pub seed: Option<u64>,
    /// The caller's configuration, recorded verbatim.
    pub config: serde_json::Value,
    /// Digest of each prompt template in force, keyed by slot name.
    pub template_digests: BTreeMap<String, String>,
    /// Digest of the strategy catalog, when one is in play.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog_digest: Option<String>,
    /// Product metadata rendered into dialog-agent system prompts; kept in
    /// the manifest so exports can reconstruct those prompts verbatim.
    #[serde(default)]
    pub product_metadata: String,
}

impl Manifest {
    pub fn new(config: serde_json::Value, seed: Option<u64>, templates: &TemplateSet) -> Self {
        Manifest {
            created_ms: now_ms(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            template_digests: templates.digests(),
            catalog_digest: None,
            product_metadata: String::new(),
        }
    }

    pub fn with_catalog_digest(mut self, digest: impl Into<String>) -> Self {
        self.catalog_digest = Some(digest.into());
        self
    }

    pub fn with_product_metadata(mut self, metadata: impl Into<String>) -> Self {
        self.product_metadata = metadata.into();
        self
    }
}

/// Handle to a run directory on disk.
#[derive(Debug)]
pub struct RunDirectory {
    root: PathBuf,
    manifest: Manifest,
}

// -- jsonl helpers -----------------------------------------------------------

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    let mut items = Vec::new();
    for (index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| Error::Schema {
            path: path.display().to_string(),
            line: index + 1,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("artifact serializes"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn append_jsonl<T: Serialize>(path: &Path, item: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(
        file,
        "{}",
        serde_json::to_string(item).expect("artifact serializes")
    )?;
    Ok(())
}

/// Content address of a dialogue collection.
pub fn collection_id(dialogues: &[Dialogue]) -> String {
    let mut concat = String::new();
    for dialogue in dialogues {
        concat.push_str(&dialogue.content_digest());
        concat.push('\n');
    }
    format!("c-{}", short_digest(concat.as_bytes()))
}

impl RunDirectory {
    /// Initialize a fresh run directory; refuses to reuse one that already
    /// has a manifest.
    pub fn create(path: impl AsRef<Path>, manifest: Manifest) -> Result<Self> {
        let root = path.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let manifest_path = root.join("manifest.json");
        if manifest_path.exists() {
            return Err(Error::ArtifactConflict {
                path: manifest_path.display().to_string(),
            });
        }
        fs::write(
            &manifest_path,
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
        Ok(RunDirectory { root, manifest })
    }

    /// Open an existing run directory.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let root = path.as_ref().to_path_buf();
        let manifest_path = root.join("manifest.json");
        let text = fs::read_to_string(&manifest_path)?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::parse(manifest_path.display().to_string(), e))?;
        Ok(RunDirectory { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Check that the templates in force now are the ones the run was
    /// created with.
    pub fn verify_templates(&self, templates: &TemplateSet) -> Result<()> {
        let current = templates.digests();
        if current == self.manifest.template_digests {
            return Ok(());
        }
        let drifted: Vec<&String> = current
            .iter()
            .filter(|(slot, digest)| self.manifest.template_digests.get(*slot) != Some(digest))
            .map(|(slot, _)| slot)
            .collect();
        Err(Error::ManifestDrift {
            message: format!(
                "templates changed since the run was created: {}",
                drifted
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        })
    }

    fn personas_path(&self) -> PathBuf {
        self.root.join("personas.jsonl")
    }

    fn prompts_path(&self) -> PathBuf {
        self.root.join("prompts.jsonl")
    }

    fn iterations_path(&self) -> PathBuf {
        self.root.join("iterations.jsonl")
    }

    fn collection_path(&self, collection: &str) -> PathBuf {
        self.root.join("collections").join(format!("{collection}.jsonl"))
    }

    fn chains_path(&self, collection: &str) -> PathBuf {
        self.root.join("chains").join(format!("{collection}.jsonl"))
    }

    fn annotations_path(&self, collection: &str) -> PathBuf {
        self.root.join("annotations").join(format!("{collection}.jsonl"))
    }

    fn scores_path(&self, collection: &str) -> PathBuf {
        self.root.join("scores").join(format!("{collection}.jsonl"))
    }

    fn export_path(&self, collection: &str) -> PathBuf {
        self.root.join("exports").join(format!("{collection}.jsonl"))
    }

    /// Record personas, skipping ids already on file.
    pub fn record_personas(&self, personas: &[UserPersona]) -> Result<()> {
        let path = self.personas_path();
        let known: BTreeSet<String> = if path.exists() {
            read_jsonl::<UserPersona>(&path)?
                .into_iter()
                .map(|p| p.id)
                .collect()
        } else {
            BTreeSet::new()
        };
        for persona in personas {
            if !known.contains(&persona.id) {
                append_jsonl(&path, persona)?;
            }
        }
        Ok(())
    }

    pub fn load_personas(&self) -> Result<Vec<UserPersona>> {
        let path = self.personas_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        read_jsonl(&path)
    }

    /// Record a prompt version unless its id is already on file.
    pub fn record_prompt(&self, prompt: &PromptVersion) -> Result<()> {
        let path = self.prompts_path();
        let known: BTreeSet<String> = if path.exists() {
            read_jsonl::<PromptVersion>(&path)?
                .into_iter()
                .map(|p| p.id)
                .collect()
        } else {
            BTreeSet::new()
        };
        if !known.contains(&prompt.id) {
            append_jsonl(&path, prompt)?;
        }
        Ok(())
    }

    pub fn load_prompts(&self) -> Result<Vec<PromptVersion>> {
        let path = self.prompts_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        read_jsonl(&path)
    }

    pub fn find_prompt(&self, id: &str) -> Result<PromptVersion> {
        self.load_prompts()?
            .into_iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::UnknownId {
                what: "prompt version".into(),
                id: id.to_string(),
            })
    }

    /// Persist a collection under its content address. Re-persisting the
    /// same content is a no-op; a different collection landing on an
    /// existing address is a conflict.
    pub fn persist_collection(&self, dialogues: &[Dialogue]) -> Result<String> {
        let id = collection_id(dialogues);
        let path = self.collection_path(&id);
        if path.exists() {
            let existing: Vec<Dialogue> = read_jsonl(&path)?;
            if collection_id(&existing) == id {
                return Ok(id);
            }
            return Err(Error::ArtifactConflict {
                path: path.display().to_string(),
            });
        }
        write_jsonl(&path, dialogues)?;
        Ok(id)
    }

    pub fn load_collection(&self, collection: &str) -> Result<Vec<Dialogue>> {
        let path = self.collection_path(collection);
        if !path.exists() {
            return Err(Error::UnknownId {
                what: "collection".into(),
                id: collection.to_string(),
            });
        }
        read_jsonl(&path)
    }

    pub fn list_collections(&self) -> Result<Vec<String>> {
        let dir = self.root.join("collections");
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let name = entry?.file_name();
            if let Some(id) = name.to_string_lossy().strip_suffix(".jsonl") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn persist_derived<T: Serialize + DeserializeOwned>(
        &self,
        path: PathBuf,
        items: &[T],
    ) -> Result<()> {
        let render = |xs: &[T]| -> String {
            xs.iter()
                .map(|x| serde_json::to_string(x).expect("artifact serializes"))
                .collect::<Vec<_>>()
                .join("\n")
        };
        if path.exists() {
            let existing: Vec<T> = read_jsonl(&path)?;
            if render(&existing) == render(items) {
                return Ok(());
            }
            return Err(Error::ArtifactConflict {
                path: path.display().to_string(),
            });
        }
        write_jsonl(&path, items)
    }

    pub fn persist_chains(&self, collection: &str, chains: &[AttitudeChain]) -> Result<()> {
        self.persist_derived(self.chains_path(collection), chains)
    }

    pub fn has_chains(&self, collection: &str) -> bool {
        self.chains_path(collection).exists()
    }

    pub fn load_chains(&self, collection: &str) -> Result<Vec<AttitudeChain>> {
        let path = self.chains_path(collection);
        if !path.exists() {
            return Err(Error::UnknownId {
                what: "attitude chains for collection".into(),
                id: collection.to_string(),
            });
        }
        read_jsonl(&path)
    }

    pub fn persist_annotations(
        &self,
        collection: &str,
        annotations: &[StrategyAnnotation],
    ) -> Result<()> {
        self.persist_derived(self.annotations_path(collection), annotations)
    }

    pub fn has_annotations(&self, collection: &str) -> bool {
        self.annotations_path(collection).exists()
    }

    pub fn load_annotations(&self, collection: &str) -> Result<Vec<StrategyAnnotation>> {
        let path = self.annotations_path(collection);
        if !path.exists() {
            return Err(Error::UnknownId {
                what: "strategy annotations for collection".into(),
                id: collection.to_string(),
            });
        }
        read_jsonl(&path)
    }

    pub fn persist_scores(&self, collection: &str, scores: &[EvaluationScores]) -> Result<()> {
        self.persist_derived(self.scores_path(collection), scores)
    }

    pub fn has_scores(&self, collection: &str) -> bool {
        self.scores_path(collection).exists()
    }

    pub fn load_scores(&self, collection: &str) -> Result<Vec<EvaluationScores>> {
        let path = self.scores_path(collection);
        if !path.exists() {
            return Err(Error::UnknownId {
                what: "scores for collection".into(),
                id: collection.to_string(),
            });
        }
        read_jsonl(&path)
    }

    /// Append one optimization-iteration record to the run log.
    pub fn append_iteration<T: Serialize>(&self, record: &T) -> Result<()> {
        append_jsonl(&self.iterations_path(), record)
    }

    /// Load the optimization-iteration log, empty if none was written.
    pub fn load_iterations<T: DeserializeOwned>(&self) -> Result<Vec<T>> {
        let path = self.iterations_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        read_jsonl(&path)
    }

    /// Export a collection as chat-format fine-tune data: one JSON line per
    /// dialogue with a `messages` array (system prompt reconstructed from
    /// the recorded prompt version, then alternating assistant/user turns)
    /// and a `meta` object carrying persona group, prompt version, and
    /// judge scores when present. Returns the file path and line count.
    pub fn export_finetune(
        &self,
        collection: &str,
        only_ids: Option<&[String]>,
        templates: &TemplateSet,
    ) -> Result<(PathBuf, usize)> {
        let dialogues = self.load_collection(collection)?;
        if let Some(ids) = only_ids {
            for id in ids {
                if !dialogues.iter().any(|d| &d.id == id) {
                    return Err(Error::UnknownId {
                        what: format!("dialogue in collection {collection}"),
                        id: id.clone(),
                    });
                }
            }
        }
        let personas: BTreeMap<String, UserPersona> = self
            .load_personas()?
            .into_iter()
            .map(|p| (p.id.clone(), p))
            .collect();
        let prompts: BTreeMap<String, PromptVersion> = self
            .load_prompts()?
            .into_iter()
            .map(|p| (p.id.clone(), p))
            .collect();
        let scores: BTreeMap<String, EvaluationScores> = if self.has_scores(collection) {
            self.load_scores(collection)?
                .into_iter()
                .map(|s| (s.dialogue_id.clone(), s))
                .collect()
        } else {
            BTreeMap::new()
        };

        let mut lines = Vec::new();
        for dialogue in &dialogues {
            if let Some(ids) = only_ids {
                if !ids.contains(&dialogue.id) {
                    continue;
                }
            }
            let mut messages = Vec::new();
            if dialogue.prompt_version_id != EXTERNAL_ID {
                if let Some(prompt) = prompts.get(&dialogue.prompt_version_id) {
                    let system =
                        templates.render_dialog_agent(prompt, &self.manifest.product_metadata)?;
                    messages.push(serde_json::json!({"role": "system", "content": system}));
                }
            }
            for turn in &dialogue.turns {
                messages
                    .push(serde_json::json!({"role": "assistant", "content": turn.assistant_text}));
                messages.push(serde_json::json!({"role": "user", "content": turn.user_text}));
            }
            let persona_group = personas
                .get(&dialogue.persona_id)
                .map(|p| p.group.as_str().to_string())
                .unwrap_or_else(|| dialogue.persona_id.clone());
            let score_meta = scores.get(&dialogue.id).map(|s| {
                let mut map = serde_json::Map::new();
                for (name, value) in s.graded() {
                    map.insert(name.to_string(), serde_json::json!(value));
                }
                map.insert("mean".into(), serde_json::json!(s.mean()));
                map.insert("task_success".into(), serde_json::json!(s.task_success));
                serde_json::Value::Object(map)
            });
            lines.push(serde_json::json!({
                "messages": messages,
                "meta": {
                    "persona_group": persona_group,
                    "prompt_version": dialogue.prompt_version_id,
                    "scores": score_meta,
                }
            }));
        }
        let path = self.export_path(collection);
        write_jsonl(&path, &lines)?;
        Ok((path, lines.len()))
    }

    /// Ingest an external dialogue file and persist it as a collection.
    pub fn ingest(&self, path: impl AsRef<Path>) -> Result<(String, usize)> {
        let records = ingest_external(path)?;
        let dialogues: Vec<Dialogue> = records
            .into_iter()
            .map(|r| r.into_dialogue())
            .collect::<Result<_>>()?;
        let count = dialogues.len();
        let id = self.persist_collection(&dialogues)?;
        Ok((id, count))
    }
}

// -- external corpora --------------------------------------------------------

/// Speaker side of an external turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExternalRole {
    Assistant,
    User,
}

/// One utterance of an external dialogue.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalTurn {
    pub role: ExternalRole,
    pub text: String,
}

/// A dialogue read from outside the engine.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalDialogueRecord {
    pub id: String,
    pub turns: Vec<ExternalTurn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

impl ExternalDialogueRecord {
    /// Convert into the engine's dialogue shape. Turns must strictly
    /// alternate starting with the assistant; a trailing assistant
    /// utterance with no reply is dropped, since a round is a
    /// pitch-and-reply pair.
    pub fn into_dialogue(self) -> Result<Dialogue> {
        let meta = UtteranceMeta {
            model: EXTERNAL_ID.to_string(),
            latency_ms: 0,
            at_ms: 0,
        };
        let mut turns = Vec::new();
        let mut pending: Option<String> = None;
        for (position, turn) in self.turns.into_iter().enumerate() {
            match (turn.role, pending.take()) {
                (ExternalRole::Assistant, None) => pending = Some(turn.text),
                (ExternalRole::User, Some(assistant_text)) => turns.push(Turn {
                    index: turns.len() as u32 + 1,
                    assistant_text,
                    user_text: turn.text,
                    assistant_meta: meta.clone(),
                    user_meta: meta.clone(),
                }),
                (role, _) => {
                    return Err(Error::Parse {
                        what: format!("external dialogue {}", self.id),
                        message: format!(
                            "turn {} breaks assistant/user alternation (got {role:?})",
                            position + 1
                        ),
                    });
                }
            }
        }
        Ok(Dialogue {
            id: self.id,
            persona_id: EXTERNAL_ID.to_string(),
            prompt_version_id: EXTERNAL_ID.to_string(),
            scenario: self.domain.unwrap_or_else(|| EXTERNAL_ID.to_string()),
            turns,
            termination: Termination::Completed,
        })
    }
}

#[derive(Deserialize)]
struct ExportedMessage {
    role: String,
    content: String,
}

#[derive(Deserialize)]
struct ExportedLine {
    messages: Vec<ExportedMessage>,
}

#[derive(Deserialize)]
struct ExternalLine {
    #[serde(default)]
    id: Option<String>,
    turns: Vec<ExternalTurn>,
    #[serde(default)]
    domain: Option<String>,
}

/// Read external dialogues from a JSONL file. Each line may use either the
/// plain external schema (`{"id", "turns": [{"role", "text"}], "domain"}`)
/// or this tool's own export schema (`{"messages": [...]}`, system lines
/// ignored), so exports round-trip. Missing ids are derived from the line
/// number.
pub fn ingest_external(path: impl AsRef<Path>) -> Result<Vec<ExternalDialogueRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = index + 1;
        let fallback_id = format!("ingest-{line_no:05}");
        if let Ok(external) = serde_json::from_str::<ExternalLine>(line) {
            records.push(ExternalDialogueRecord {
                id: external.id.unwrap_or(fallback_id),
                turns: external.turns,
                domain: external.domain,
            });
            continue;
        }
        match serde_json::from_str::<ExportedLine>(line) {
            Ok(exported) => {
                let turns = exported
                    .messages
                    .into_iter()
                    .filter(|m| m.role != "system")
                    .map(|m| {
                        let role = match m.role.as_str() {
                            "assistant" => Ok(ExternalRole::Assistant),
                            "user" => Ok(ExternalRole::User),
                            other => Err(Error::Schema {
                                path: path.display().to_string(),
                                line: line_no,
                                message: format!("unknown message role `{other}`"),
                            }),
                        }?;
                        Ok(ExternalTurn {
                            role,
                            text: m.content,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                records.push(ExternalDialogueRecord {
                    id: fallback_id,
                    turns,
                    domain: None,
                });
            }
            Err(e) => {
                return Err(Error::Schema {
                    path: path.display().to_string(),
                    line: line_no,
                    message: format!("line matches neither dialogue schema: {e}"),
                });
            }
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyInput {
            what: format!("external dialogue file {}", path.display()),
        });
    }
    Ok(records)
}
