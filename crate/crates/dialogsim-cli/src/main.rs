//! Command-line front end for the dialogue simulation engine.
//!
//! Every subcommand prints a JSON report to stdout (or `--out`) and a short
//! human summary to stderr, so the tool composes with shell pipelines.
//! Model roles are served either by an HTTP chat backend (`--backend
//! config.json`) or by a scripted backend (`--scripted script.json`) for
//! fully offline, deterministic runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use dialogsim::backends::{
    BackendConfig, ChatBackend, ChatMessage, HttpBackend, ScriptedBackend,
};
use dialogsim::coa::{
    classify_collection, coa_report, estimate_transitions, js_divergence, AttitudeChain,
};
use dialogsim::engine::{run_simulation, BackendPair, SimulationJob};
use dialogsim::judge::{evaluate_collection, filter_corpus, FilterPolicy};
use dialogsim::optimizer::{
    optimize, resolve_persona_spec, OptimizationConfig, OptimizerBackends,
};
use dialogsim::persona::{default_state_space, sample_personas, StateSpace};
use dialogsim::prompts::{PromptVersion, TemplateSet};
use dialogsim::store::{ingest_external, Manifest, RunDirectory};
use dialogsim::strategy::{annotate_collection, strategy_report, StrategyCatalog};

#[derive(Parser)]
#[command(
    name = "dialogsim",
    version,
    about = "Closed-loop multi-agent dialogue simulation, analytics, and prompt optimization"
)]
struct Cli {
    /// Seed for persona sampling and deterministic backend mode.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// HTTP chat-backend config file (JSON), used for every model role.
    #[arg(long, global = true, value_name = "FILE", conflicts_with = "scripted")]
    backend: Option<PathBuf>,

    /// Scripted backend file (JSON) answering from canned responses;
    /// replaces every model role for offline runs.
    #[arg(long, global = true, value_name = "FILE")]
    scripted: Option<PathBuf>,

    /// Directory of prompt-template overrides (one `<slot>.txt` per
    /// template to replace).
    #[arg(long, global = true, value_name = "DIR")]
    templates: Option<PathBuf>,

    /// Write the JSON report to this file instead of stdout.
    #[arg(long, global = true, value_name = "FILE")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample user personas from an attribute-distribution spec.
    SamplePersonas {
        /// Builtin group (base, sign, mbti, busi) or a spec-file path.
        #[arg(long, default_value = "base")]
        spec: String,
        /// How many personas to sample.
        #[arg(short = 'n', long, default_value_t = 8)]
        count: usize,
    },

    /// Simulate a batch of persuasive dialogues into a run directory.
    Simulate {
        /// Run directory (created if it does not exist yet).
        #[arg(long)]
        run: PathBuf,
        /// Builtin persona group or spec-file path.
        #[arg(long, default_value = "base")]
        spec: String,
        /// Dialog-agent task prompt.
        #[arg(long)]
        prompt: String,
        /// Round budget per dialogue.
        #[arg(long, default_value_t = 8)]
        rounds: u32,
        /// Number of personas to sample.
        #[arg(long, default_value_t = 4)]
        personas: usize,
        /// Dialogues per persona.
        #[arg(long, default_value_t = 1)]
        per_persona: u32,
        /// Maximum concurrent dialogues.
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        /// Product metadata injected into the dialog-agent system prompt.
        #[arg(long, default_value = "")]
        metadata: String,
        /// Scenario tag recorded on each dialogue.
        #[arg(long, default_value = "sales-call")]
        scenario: String,
    },

    /// Attitude-chain analytics for a collection: transition matrix,
    /// entropies, acceptance rate, optional divergence against a baseline.
    AnalyzeCoa {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        collection: String,
        /// Custom attitude state-space file (defaults to the 16-state
        /// funnel space).
        #[arg(long, value_name = "FILE")]
        states: Option<PathBuf>,
        /// Baseline collection id to compute Jensen-Shannon divergence
        /// against.
        #[arg(long, value_name = "COLLECTION")]
        baseline: Option<String>,
        /// Write the transition-probability matrix as CSV here.
        #[arg(long, value_name = "FILE")]
        matrix_out: Option<PathBuf>,
    },

    /// Persuasion-strategy annotation statistics for a collection.
    AnalyzeStrategies {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        collection: String,
        /// Custom strategy catalog file (defaults to the builtin
        /// ten-strategy taxonomy).
        #[arg(long, value_name = "FILE")]
        catalog: Option<PathBuf>,
    },

    /// Judge a collection and filter it down to the keepable subset.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        collection: String,
        /// Minimum mean graded score to keep a dialogue.
        #[arg(long, default_value_t = 2.0)]
        min_mean: f64,
        /// Keep at most this top fraction of the collection by mean score.
        #[arg(long, default_value_t = 1.0)]
        quantile: f64,
        /// Drop dialogues the judge marked unsuccessful.
        #[arg(long)]
        require_success: bool,
    },

    /// Run the closed-loop prompt optimizer.
    Optimize {
        /// Optimization config file (JSON).
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Run directory (created unless resuming).
        #[arg(long)]
        run: PathBuf,
        /// Continue a previous run from its recorded iterations.
        #[arg(long)]
        resume: bool,
    },

    /// Export a collection as chat-format fine-tune data.
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        collection: String,
        /// Comma-separated dialogue ids to keep (default: all).
        #[arg(long, value_delimiter = ',')]
        ids: Option<Vec<String>>,
    },

    /// Read an external dialogue file; with --run, persist it as a
    /// collection.
    Ingest {
        /// JSONL file of external dialogues (plain or export schema).
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

/// Either backend kind behind one object, so subcommands can stay generic.
enum AnyBackend {
    Scripted(ScriptedBackend),
    Http(HttpBackend),
}

impl ChatBackend for AnyBackend {
    fn complete(&self, messages: &[ChatMessage]) -> dialogsim::Result<String> {
        match self {
            AnyBackend::Scripted(b) => b.complete(messages),
            AnyBackend::Http(b) => b.complete(messages),
        }
    }

    fn model_name(&self) -> String {
        match self {
            AnyBackend::Scripted(b) => b.model_name(),
            AnyBackend::Http(b) => b.model_name(),
        }
    }
}

fn shared_backend(cli: &Cli) -> Result<Option<AnyBackend>> {
    if let Some(path) = &cli.scripted {
        let backend = ScriptedBackend::from_file(path)
            .with_context(|| format!("loading scripted backend {}", path.display()))?;
        return Ok(Some(AnyBackend::Scripted(backend)));
    }
    if let Some(path) = &cli.backend {
        let mut config = BackendConfig::load(path)
            .with_context(|| format!("loading backend config {}", path.display()))?;
        if let Some(seed) = cli.seed {
            config = config.deterministic(seed);
        }
        return Ok(Some(AnyBackend::Http(HttpBackend::new(config)?)));
    }
    Ok(None)
}

fn require_backend(shared: &Option<AnyBackend>) -> Result<&AnyBackend> {
    shared
        .as_ref()
        .ok_or_else(|| anyhow!("this command talks to models; pass --backend or --scripted"))
}

fn load_templates(cli: &Cli) -> Result<TemplateSet> {
    match &cli.templates {
        Some(dir) => TemplateSet::load_dir(dir)
            .with_context(|| format!("loading template overrides from {}", dir.display())),
        None => Ok(TemplateSet::builtin()),
    }
}

fn emit(out: &Option<PathBuf>, report: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    match out {
        Some(path) => fs::write(path, format!("{text}\n"))
            .with_context(|| format!("writing report to {}", path.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn open_run(path: &Path) -> Result<RunDirectory> {
    RunDirectory::open(path)
        .with_context(|| format!("opening run directory {}", path.display()))
}

/// Open `path` as a run directory, creating it with `manifest` when it does
/// not hold one yet.
fn open_or_create_run(path: &Path, manifest: impl FnOnce() -> Manifest) -> Result<RunDirectory> {
    if path.join("manifest.json").exists() {
        open_run(path)
    } else {
        RunDirectory::create(path, manifest())
            .with_context(|| format!("creating run directory {}", path.display()))
    }
}

/// Chains persisted for `collection`, or freshly classified (and persisted)
/// when none are on file yet.
fn chains_for(
    run: &RunDirectory,
    collection: &str,
    space: &StateSpace,
    shared: &Option<AnyBackend>,
    templates: &TemplateSet,
) -> Result<(Vec<AttitudeChain>, Vec<String>)> {
    if run.has_chains(collection) {
        let chains = run.load_chains(collection)?;
        // Persisted chains may have been classified against a different
        // space; refuse silently-wrong aggregation.
        for chain in &chains {
            for &state in &chain.states {
                if state >= space.len() {
                    bail!(
                        "chain for dialogue {} uses state index {state}, outside the \
                         {}-state space `{}`; re-classify with matching --states",
                        chain.dialogue_id,
                        space.len(),
                        space.name
                    );
                }
            }
        }
        return Ok((chains, Vec::new()));
    }
    let dialogues = run.load_collection(collection)?;
    let backend = require_backend(shared)?;
    let (chains, skipped) = classify_collection(&dialogues, space, backend, templates)?;
    run.persist_chains(collection, &chains)?;
    Ok((chains, skipped))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let templates = load_templates(&cli)?;
    let shared = shared_backend(&cli)?;

    match &cli.command {
        Command::SamplePersonas { spec, count } => {
            let spec = resolve_persona_spec(spec)?;
            let seed = cli.seed.unwrap_or(0);
            let personas = sample_personas(&spec, *count, seed)?;
            eprintln!(
                "sampled {} persona(s) from group `{}` with seed {seed}",
                personas.len(),
                spec.group.as_str()
            );
            emit(&cli.out, &serde_json::to_value(&personas)?)?;
        }

        Command::Simulate {
            run,
            spec,
            prompt,
            rounds,
            personas,
            per_persona,
            parallelism,
            metadata,
            scenario,
        } => {
            let seed = cli.seed.unwrap_or(0);
            let spec_source = spec;
            let spec = resolve_persona_spec(spec)?;
            let run = open_or_create_run(run, || {
                Manifest::new(
                    serde_json::json!({
                        "command": "simulate",
                        "spec": spec_source,
                        "rounds": rounds,
                        "personas": personas,
                        "per_persona": per_persona,
                        "scenario": scenario,
                    }),
                    Some(seed),
                    &templates,
                )
                .with_product_metadata(metadata.clone())
            })?;
            run.verify_templates(&templates)?;
            let sampled = sample_personas(&spec, *personas, seed)?;
            let prompt = PromptVersion::initial(prompt.clone());
            let prompt_id = prompt.id.clone();
            let mut job = SimulationJob::new(sampled, prompt, *rounds);
            job.dialogues_per_persona = *per_persona;
            job.seed = seed;
            job.parallelism = *parallelism;
            job.product_metadata = metadata.clone();
            job.scenario = scenario.clone();
            let backend = require_backend(&shared)?;
            let (collection, dialogues) = run_simulation(
                &job,
                BackendPair {
                    user: backend,
                    dialog: backend,
                },
                &templates,
                &run,
            )?;
            let failed = dialogues
                .iter()
                .filter(|d| d.termination == dialogsim::engine::Termination::BackendError)
                .count();
            eprintln!(
                "simulated {} dialogue(s) into collection {collection} ({failed} failed)",
                dialogues.len()
            );
            emit(
                &cli.out,
                &serde_json::json!({
                    "run": run.root(),
                    "collection": collection,
                    "dialogues": dialogues.len(),
                    "failed": failed,
                    "persona_group": spec.group.as_str(),
                    "prompt_version": prompt_id,
                    "seed": seed,
                }),
            )?;
        }

        Command::AnalyzeCoa {
            run,
            collection,
            states,
            baseline,
            matrix_out,
        } => {
            let run = open_run(run)?;
            let space = match states {
                Some(path) => StateSpace::load(path)?,
                None => default_state_space(),
            };
            let (chains, skipped) = chains_for(&run, collection, &space, &shared, &templates)?;
            if chains.is_empty() {
                bail!("collection {collection} has no classifiable dialogues");
            }
            let matrix = estimate_transitions(&chains, &space);
            let report = coa_report(&matrix);
            let js_vs_baseline = match baseline {
                Some(baseline_id) => {
                    let (baseline_chains, _) =
                        chains_for(&run, baseline_id, &space, &shared, &templates)?;
                    if baseline_chains.is_empty() {
                        bail!("baseline collection {baseline_id} has no classifiable dialogues");
                    }
                    let baseline_matrix = estimate_transitions(&baseline_chains, &space);
                    Some(js_divergence(&baseline_matrix, &matrix)?)
                }
                None => None,
            };
            if let Some(path) = matrix_out {
                fs::write(path, matrix.to_csv())
                    .with_context(|| format!("writing matrix CSV to {}", path.display()))?;
            }
            eprintln!(
                "collection {collection}: {} chain(s), H_avg {:.4}, H_norm {:.4}, acceptance {:.3}",
                report.chain_count, report.h_avg, report.h_norm, report.acceptance_rate
            );
            if let Some(js) = js_vs_baseline {
                eprintln!("divergence vs {}: {js:.4}", baseline.as_deref().unwrap_or(""));
            }
            emit(
                &cli.out,
                &serde_json::json!({
                    "collection": collection,
                    "state_space": space.name,
                    "chain_count": report.chain_count,
                    "skipped": skipped,
                    "h_rows": report.h_rows,
                    "h_avg": report.h_avg,
                    "h_norm": report.h_norm,
                    "h_avg_seen_only": report.h_avg_seen_only,
                    "unseen_rows": report.unseen_rows,
                    "acceptance_rate": report.acceptance_rate,
                    "js_vs_baseline": js_vs_baseline,
                    "matrix_csv": matrix_out,
                    "note": report.note,
                }),
            )?;
        }

        Command::AnalyzeStrategies {
            run,
            collection,
            catalog,
        } => {
            let run = open_run(run)?;
            let catalog = match catalog {
                Some(path) => StrategyCatalog::load(path)?,
                None => StrategyCatalog::p4g_default(),
            };
            let (annotations, skipped) = if run.has_annotations(collection) {
                (run.load_annotations(collection)?, Vec::new())
            } else {
                let dialogues = run.load_collection(collection)?;
                let backend = require_backend(&shared)?;
                let (annotations, skipped) =
                    annotate_collection(&dialogues, &catalog, backend, &templates)?;
                run.persist_annotations(collection, &annotations)?;
                (annotations, skipped)
            };
            let report = strategy_report(&annotations, &catalog)?;
            eprintln!(
                "collection {collection}: {} annotation(s), {:.2} strategies/dialogue, cv {:.3}",
                report.annotation_count, report.c_str, report.cv
            );
            emit(
                &cli.out,
                &serde_json::json!({
                    "collection": collection,
                    "catalog": catalog.name,
                    "annotation_count": report.annotation_count,
                    "no_quorum_count": report.no_quorum_count,
                    "skipped": skipped,
                    "c_str": report.c_str,
                    "sigma": report.sigma,
                    "cv": report.cv,
                    "shares": report.shares,
                    "note": report.note,
                }),
            )?;
        }

        Command::Evaluate {
            run,
            collection,
            min_mean,
            quantile,
            require_success,
        } => {
            let run = open_run(run)?;
            let dialogues = run.load_collection(collection)?;
            let (scores, skipped) = if run.has_scores(collection) {
                (run.load_scores(collection)?, Vec::new())
            } else {
                let backend = require_backend(&shared)?;
                let (scores, skipped) = evaluate_collection(&dialogues, backend, &templates)?;
                run.persist_scores(collection, &scores)?;
                (scores, skipped)
            };
            if scores.is_empty() {
                bail!("collection {collection} has no scorable dialogues");
            }
            let policy = FilterPolicy {
                min_mean: *min_mean,
                quantile: *quantile,
                require_success: *require_success,
            };
            // Filter over the scored subset; unscorable dialogues are
            // reported, not silently judged.
            let scored: Vec<_> = dialogues
                .iter()
                .filter(|d| scores.iter().any(|s| s.dialogue_id == d.id))
                .cloned()
                .collect();
            let kept = filter_corpus(&scored, &scores, &policy)?;
            let mean_of_means =
                scores.iter().map(|s| s.mean()).sum::<f64>() / scores.len() as f64;
            let successes = scores.iter().filter(|s| s.task_success).count();
            eprintln!(
                "collection {collection}: {} scored, mean {:.2}, {} successful, kept {}",
                scores.len(),
                mean_of_means,
                successes,
                kept.len()
            );
            emit(
                &cli.out,
                &serde_json::json!({
                    "collection": collection,
                    "evaluated": scores.len(),
                    "skipped": skipped,
                    "mean_of_means": mean_of_means,
                    "success_rate": successes as f64 / scores.len() as f64,
                    "policy": policy,
                    "kept": kept,
                }),
            )?;
        }

        Command::Optimize {
            config,
            run,
            resume,
        } => {
            let raw: serde_json::Value = serde_json::from_str(
                &fs::read_to_string(config)
                    .with_context(|| format!("reading {}", config.display()))?,
            )
            .with_context(|| format!("parsing {}", config.display()))?;
            let mut config = OptimizationConfig::load(config)?;
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            // The config file may pin per-role HTTP backends; anything it
            // leaves out falls back to the shared --backend/--scripted one.
            let mut role_backends: BTreeMap<String, AnyBackend> = BTreeMap::new();
            if let Some(overrides) = raw.get("backends") {
                let configs: BTreeMap<String, BackendConfig> =
                    serde_json::from_value(overrides.clone())
                        .context("parsing per-role backend configs")?;
                for (role, mut backend_config) in configs {
                    if !["user", "dialog", "classifier", "judge", "evolution"]
                        .contains(&role.as_str())
                    {
                        bail!("unknown backend role `{role}` in config");
                    }
                    if let Some(seed) = cli.seed {
                        backend_config = backend_config.deterministic(seed);
                    }
                    role_backends.insert(role, AnyBackend::Http(HttpBackend::new(backend_config)?));
                }
            }
            let role = |name: &str| -> Result<&dyn ChatBackend> {
                if let Some(backend) = role_backends.get(name) {
                    return Ok(backend);
                }
                Ok(require_backend(&shared)?)
            };
            let backends = OptimizerBackends {
                user: role("user")?,
                dialog: role("dialog")?,
                classifier: role("classifier")?,
                judge: role("judge")?,
                evolution: role("evolution")?,
            };
            let run = if *resume {
                open_run(run)?
            } else {
                RunDirectory::create(
                    run,
                    Manifest::new(
                        serde_json::to_value(&config)?,
                        Some(config.seed),
                        &templates,
                    )
                    .with_product_metadata(config.product_metadata.clone()),
                )
                .with_context(|| format!("creating run directory {}", run.display()))?
            };
            let outcome = optimize(&config, &backends, &templates, &run, *resume)?;
            for record in &outcome.records {
                eprintln!(
                    "k={} prompt={} tau={:.3} entropy={:.4} {}",
                    record.k,
                    record.prompt_version_id,
                    record.gate.tau,
                    record.gate.entropy,
                    record.note
                );
            }
            eprintln!(
                "{} after {} iteration(s); final prompt {}",
                if outcome.early_exit {
                    "gate passed"
                } else {
                    "budget exhausted"
                },
                outcome.records.len(),
                outcome.final_prompt.id
            );
            emit(
                &cli.out,
                &serde_json::json!({
                    "run": run.root(),
                    "early_exit": outcome.early_exit,
                    "iterations_run": outcome.iterations_run,
                    "baseline_entropy": outcome.baseline_entropy,
                    "final_prompt": {
                        "id": outcome.final_prompt.id,
                        "iteration": outcome.final_prompt.iteration,
                    },
                    "final_collection": outcome.final_collection,
                    "records": outcome.records,
                }),
            )?;
        }

        Command::Export {
            run,
            collection,
            ids,
        } => {
            let run = open_run(run)?;
            let (path, lines) =
                run.export_finetune(collection, ids.as_deref(), &templates)?;
            eprintln!("exported {lines} dialogue(s) to {}", path.display());
            emit(
                &cli.out,
                &serde_json::json!({
                    "collection": collection,
                    "path": path,
                    "lines": lines,
                }),
            )?;
        }

        Command::Ingest { file, run } => {
            let records = ingest_external(file)?;
            let mut domains: BTreeMap<String, usize> = BTreeMap::new();
            for record in &records {
                let key = record.domain.clone().unwrap_or_else(|| "unspecified".into());
                *domains.entry(key).or_default() += 1;
            }
            let collection = match run {
                Some(path) => {
                    let run = open_or_create_run(path, || {
                        Manifest::new(
                            serde_json::json!({"command": "ingest"}),
                            None,
                            &templates,
                        )
                    })?;
                    let (collection, _) = run.ingest(file)?;
                    Some(collection)
                }
                None => None,
            };
            eprintln!(
                "read {} external dialogue(s){}",
                records.len(),
                collection
                    .as_ref()
                    .map(|c| format!(", persisted as {c}"))
                    .unwrap_or_default()
            );
            emit(
                &cli.out,
                &serde_json::json!({
                    "file": file,
                    "dialogues": records.len(),
                    "domains": domains,
                    "collection": collection,
                }),
            )?;
        }
    }
    Ok(())
}
