use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde_json::Value;
use tracing::{info, warn};

use super::memory::{
    init_memory, load_memory, memory_path, save_memory, InspectionMemory, IterationRecord, TurnEnd,
};
use super::priority::PriorityPartition;
use super::shared::{SharedEntry, SharedMemory};
use super::tools::{dispatch, inspection_tools, InspectionEnv, ToolEffect, READ_SHARED_PUBLIC_MEMORY};
use super::InspectionError;
use crate::code_facts::CodeIndex;
use crate::llm::{Gateway, GatewayError, Message, Role as MsgRole, Stage, ToolRegistry, Usage};
use crate::repo_semantics::RepositorySemantics;
use crate::vuln_semantics::VulnerabilitySemantics;

pub const INSPECTION_PROMPT_ID: &str = "inspection-turn";
pub const DISTILL_PROMPT_ID: &str = "shared-memory-distill";

const LISTED_FILES: usize = 60;
const KEPT_FAILURES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExistingMemory {
    /// Continue from the persisted state.
    Resume,
    /// Discard it and start over.
    Fresh,
    Fail,
}

#[derive(Debug, Clone)]
pub struct InspectionConfig {
    pub max_iterations: u32,
    /// Tool calls allowed per iteration.
    pub turn_budget: usize,
    /// Fraction of the context window kept free; compaction triggers above the rest.
    pub reserve_fraction: f64,
    pub max_shared_entries: usize,
    /// Stop after this many iterations in this invocation, leaving the
    /// memory resumable. Used to simulate an interrupted run.
    pub halt_after: Option<u32>,
    pub existing: ExistingMemory,
    pub run_id: String,
}

impl Default for InspectionConfig {
    fn default() -> Self {
        Self {
            max_iterations: 3,
            turn_budget: 40,
            reserve_fraction: 0.2,
            max_shared_entries: 8,
            halt_after: None,
            existing: ExistingMemory::Resume,
            run_id: "run".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct InspectionOutcome {
    pub memory: InspectionMemory,
    pub memory_path: PathBuf,
    pub usage: Usage,
    pub resumed: bool,
    pub halted: bool,
    /// Set when a backend failure ended the run early.
    pub aborted: Option<String>,
    pub shared_written: usize,
}

const SYSTEM_PROMPT: &str = "You are auditing a Python repository for a variant of a known vulnerability. \
Work through the files in the order given, highest priority first. Use the tools to read code and follow data from \
untrusted inputs to sensitive operations. Only report a candidate with report_vulnerability when you can name the \
file, line span and function of the sink and describe the path from source to sink. Mark each file with \
mark_file_completed once you have inspected it. Record ideas you ruled out with record_rejected_hypothesis. \
Call finish_inspection when you are done for this turn.";

/// Task message rebuilt from the memory at the start of every iteration.
pub fn build_task_message(
    target: &RepositorySemantics,
    vuln: &VulnerabilitySemantics,
    memory: &InspectionMemory,
) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "# Reference vulnerability {}\n{}\n\nWitness chain in the reference project:\n{}\n",
        vuln.advisory_id,
        vuln.features.render(),
        vuln.chain.render()
    ));
    s.push_str(&format!(
        "\n# Target {}@{}\n{}\n",
        memory.project, memory.commit, target.summary.description
    ));
    s.push_str("\n# Module priorities\n");
    for (tier, ids) in memory.priorities.tiers() {
        let names: Vec<&str> = ids.iter().map(|m| m.as_str()).collect();
        s.push_str(&format!("{tier:?}: {}\n", if names.is_empty() { "(none)".into() } else { names.join("; ") }));
    }
    s.push_str(&format!(
        "\n# Progress\n{}\nScope: {}\n",
        memory.progress_line(),
        memory.scope_boundary.description
    ));
    let remaining = memory.remaining_in_order();
    s.push_str("\nFiles still to inspect, in order:\n");
    for f in remaining.iter().take(LISTED_FILES) {
        let tier = memory.priority_of_file(f).map(|p| format!("{p:?}")).unwrap_or_default();
        s.push_str(&format!("- {f} [{tier}]\n"));
    }
    if remaining.len() > LISTED_FILES {
        s.push_str(&format!("- ... {} more\n", remaining.len() - LISTED_FILES));
    }
    let completed = memory.completed_files();
    if !completed.is_empty() {
        s.push_str(&format!("\nAlready completed: {}\n", completed.into_iter().collect::<Vec<_>>().join(", ")));
    }
    if !memory.candidates.is_empty() {
        s.push_str("\nCandidates reported so far:\n");
        for c in &memory.candidates {
            s.push_str(&format!(
                "- {} {}:{}-{} sink {} ({:?})\n",
                c.id, c.location.file, c.location.start_line, c.location.end_line, c.sink, c.confidence
            ));
        }
    }
    if !memory.rejected_hypotheses.is_empty() {
        s.push_str("\nRejected hypotheses:\n");
        for h in &memory.rejected_hypotheses {
            s.push_str(&format!("- {h}\n"));
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compaction {
    pub messages: Vec<Message>,
    pub compacted: bool,
    /// The summary or the task had to be cut to fit.
    pub truncated: bool,
}

/// Shrinks a conversation to at most `budget` predicted tokens. The system
/// prompt and task are kept; everything after them is replaced by a summary
/// that preserves failed tool calls and shared-memory reads.
pub fn compact_context(
    messages: &[Message],
    memory: &InspectionMemory,
    budget: usize,
    tools: &ToolRegistry,
) -> Compaction {
    if Gateway::predicted_tokens(messages, tools) <= budget {
        return Compaction {
            messages: messages.to_vec(),
            compacted: false,
            truncated: false,
        };
    }
    let head = messages.len().min(2);
    let mut names = BTreeMap::new();
    for m in messages {
        for c in &m.tool_calls {
            names.insert(c.id.clone(), (c.name.clone(), c.arguments.to_string()));
        }
    }
    let mut failures = Vec::new();
    let mut shared_hits = Vec::new();
    for m in &messages[head..] {
        if m.role != MsgRole::Tool {
            continue;
        }
        let (name, args) = m
            .tool_call_id
            .as_ref()
            .and_then(|id| names.get(id))
            .cloned()
            .unwrap_or_default();
        if m.content.starts_with("error:") {
            failures.push(format!("{name}({args}) -> {}", m.content));
        } else if name == READ_SHARED_PUBLIC_MEMORY {
            shared_hits.push(m.content.clone());
        }
    }
    let skip = failures.len().saturating_sub(KEPT_FAILURES);
    let mut summary = format!("[context compacted]\n{}\n", memory.progress_line());
    if !failures.is_empty() {
        summary.push_str("Failed tool calls (do not repeat them):\n");
        for f in &failures[skip..] {
            summary.push_str(&format!("- {f}\n"));
        }
    }
    for h in &shared_hits {
        summary.push_str(&format!("Shared memory: {h}\n"));
    }
    summary.push_str("Continue with the remaining files listed in the task.");

    let mut out: Vec<Message> = messages[..head].to_vec();
    out.push(Message::user(summary));
    let mut truncated = false;
    while Gateway::predicted_tokens(&out, tools) > budget {
        // cut the longest message by half, never the system prompt
        let Some(idx) = (1..out.len()).max_by_key(|i| out[*i].content.len()) else { break };
        let content = &out[idx].content;
        if content.len() < 32 {
            break;
        }
        let keep: String = content.chars().take(content.chars().count() / 2).collect();
        out[idx].content = format!("{keep}\n[truncated]");
        truncated = true;
    }
    Compaction {
        messages: out,
        compacted: true,
        truncated,
    }
}

struct IterationOutput {
    record: IterationRecord,
    usage: Usage,
    backend_error: Option<String>,
}

fn run_iteration(
    env: &InspectionEnv<'_>,
    memory: &mut InspectionMemory,
    path: &Path,
    gateway: &Gateway,
    config: &InspectionConfig,
) -> Result<IterationOutput, InspectionError> {
    memory.iteration_count += 1;
    save_memory(path, memory)?;
    let tools = inspection_tools();
    let mut messages = vec![
        Message::system(SYSTEM_PROMPT),
        Message::user(build_task_message(env.target, env.vuln, memory)),
    ];
    let budget = (gateway.context_window() as f64 * (1.0 - config.reserve_fraction)) as usize;
    let mut usage = Usage::default();
    let mut calls_made = 0;
    let mut compactions = 0;
    let mut files_completed = Vec::new();
    let mut candidates_reported = Vec::new();
    let mut diagnostics = Vec::new();
    let mut backend_error = None;
    let ended_by = loop {
        if calls_made >= config.turn_budget {
            break TurnEnd::TurnBudget;
        }
        if Gateway::predicted_tokens(&messages, &tools) > budget {
            let c = compact_context(&messages, memory, budget, &tools);
            messages = c.messages;
            compactions += 1;
            if c.truncated {
                diagnostics.push("context truncated during compaction".into());
            }
        }
        let outcome = match gateway.chat(Stage::Inspection, INSPECTION_PROMPT_ID, &messages, &tools) {
            Ok(o) => o,
            Err(e @ GatewayError::Oversized { .. }) => {
                diagnostics.push(e.to_string());
                break TurnEnd::ContextBudget;
            }
            Err(e) => {
                warn!("inspection turn failed: {e}");
                diagnostics.push(e.to_string());
                backend_error = Some(e.to_string());
                break TurnEnd::BackendError;
            }
        };
        usage.add(outcome.usage);
        diagnostics.extend(outcome.diagnostics);
        if outcome.tool_calls.is_empty() {
            break TurnEnd::NoToolCalls;
        }
        messages.push(Message::assistant(outcome.content, outcome.tool_calls.clone()));
        let mut finished = false;
        for call in &outcome.tool_calls {
            if calls_made >= config.turn_budget {
                messages.push(Message::tool(&call.id, "not executed: turn budget exhausted"));
                continue;
            }
            calls_made += 1;
            let result = dispatch(env, memory, call);
            match &result.effect {
                ToolEffect::Completed(f) => files_completed.push(f.clone()),
                ToolEffect::Candidate { id, merged: false } => candidates_reported.push(id.clone()),
                ToolEffect::Finish => finished = true,
                _ => {}
            }
            messages.push(Message::tool(&call.id, result.content));
        }
        save_memory(path, memory)?;
        if finished {
            break TurnEnd::Finished;
        }
    };
    let record = IterationRecord {
        iteration: memory.iteration_count,
        tool_calls: calls_made,
        files_completed,
        candidates_reported,
        ended_by,
        compactions,
        diagnostics,
    };
    memory.iterations.push(record.clone());
    save_memory(path, memory)?;
    info!(
        iteration = memory.iteration_count,
        calls = calls_made,
        "inspection iteration ended: {:?}; {}",
        ended_by,
        memory.progress_line()
    );
    Ok(IterationOutput {
        record,
        usage,
        backend_error,
    })
}

/// Asks the backend for short cross-run observations drawn from this run's
/// flow notes and candidates. Failures yield no entries.
pub fn distill_shared_memory(
    target: &RepositorySemantics,
    memory: &InspectionMemory,
    gateway: &Gateway,
    max_entries: usize,
    run_id: &str,
) -> (Vec<SharedEntry>, Usage) {
    if memory.flow_notes.is_empty() && memory.candidates.is_empty() {
        return (Vec::new(), Usage::default());
    }
    let mut prompt = String::from(
        "Summarize observations about this project that would help a later audit. Reply with JSON \
{\"entries\": [{\"scope\": <module id>, \"observation\": <one sentence>}]}.\n\nData-flow notes:\n",
    );
    for n in &memory.flow_notes {
        prompt.push_str(&format!("- [{}] {}::{}: {}\n", n.module, n.file, n.function, n.summary));
    }
    prompt.push_str("\nCandidates:\n");
    for c in &memory.candidates {
        let scope = memory.module_of.get(&c.location.file).and_then(|m| m.first());
        prompt.push_str(&format!(
            "- [{}] {}:{} reaches {}\n",
            scope.map(|m| m.as_str()).unwrap_or("unassigned"),
            c.location.file,
            c.location.start_line,
            c.sink
        ));
    }
    let universe = target.module_universe();
    let project = memory.project.clone();
    let parse = |v: &Value| -> Result<Vec<SharedEntry>, String> {
        let entries = v
            .get("entries")
            .and_then(Value::as_array)
            .ok_or("missing `entries` array")?;
        let mut out = Vec::new();
        for e in entries {
            let scope = e.get("scope").and_then(Value::as_str).ok_or("entry without `scope`")?;
            let observation = e
                .get("observation")
                .and_then(Value::as_str)
                .ok_or("entry without `observation`")?;
            if !universe.iter().any(|m| m.as_str() == scope) {
                return Err(format!("unknown module `{scope}`"));
            }
            if observation.trim().is_empty() {
                continue;
            }
            out.push(SharedEntry {
                project: project.clone(),
                scope: scope.to_string(),
                observation: observation.trim().to_string(),
                run_id: run_id.to_string(),
            });
        }
        Ok(out)
    };
    match gateway.complete_structured(Stage::Inspection, DISTILL_PROMPT_ID, &[Message::user(prompt)], parse) {
        Ok((mut entries, usage)) => {
            entries.truncate(max_entries);
            (entries, usage)
        }
        Err(e) => {
            warn!("shared memory distillation skipped: {e}");
            (Vec::new(), Usage::default())
        }
    }
}

/// Runs (or resumes) the inspection of one target revision.
#[allow(clippy::too_many_arguments)]
pub fn inspect_target(
    target: &RepositorySemantics,
    vuln: &VulnerabilitySemantics,
    priorities: PriorityPartition,
    gateway: &Gateway,
    shared: &SharedMemory,
    memory_dir: &Path,
    sarif: Option<&Path>,
    config: &InspectionConfig,
) -> Result<InspectionOutcome, InspectionError> {
    let co = &target.checkout;
    let path = memory_path(memory_dir, &vuln.advisory_id, &co.project_name, &co.commit_id);
    let (mut memory, resumed) = match (path.exists(), config.existing) {
        (true, ExistingMemory::Fail) => return Err(InspectionError::MemoryExists(path.display().to_string())),
        (true, ExistingMemory::Resume) => {
            let m = load_memory(&path)?;
            if m.advisory_id != vuln.advisory_id || m.project != co.project_name || m.commit != co.commit_id {
                return Err(InspectionError::MemoryMismatch(path.display().to_string()));
            }
            (m, true)
        }
        _ => {
            let m = init_memory(target, vuln, priorities, config.max_iterations);
            save_memory(&path, &m)?;
            (m, false)
        }
    };
    let (index, _) = CodeIndex::build(co)?;
    let relations = index.call_relations();
    let env = InspectionEnv {
        target,
        vuln,
        relations: &relations,
        shared,
        sarif,
    };
    let mut usage = Usage::default();
    let mut ran = 0;
    let mut aborted = None;
    let mut halted = false;
    while memory.iteration_count < memory.max_iterations && !memory.stop_policy_satisfied() {
        if config.halt_after.is_some_and(|h| ran >= h) {
            halted = true;
            break;
        }
        let out = run_iteration(&env, &mut memory, &path, gateway, config)?;
        usage.add(out.usage);
        ran += 1;
        if let Some(e) = out.backend_error {
            aborted = Some(e);
            break;
        }
        debug_assert_eq!(out.record.iteration, memory.iteration_count);
    }
    let mut shared_written = 0;
    if !halted && aborted.is_none() {
        let (entries, u) = distill_shared_memory(target, &memory, gateway, config.max_shared_entries, &config.run_id);
        usage.add(u);
        shared.append(&entries)?;
        shared_written = entries.len();
    }
    Ok(InspectionOutcome {
        memory,
        memory_path: path,
        usage,
        resumed,
        halted,
        aborted,
        shared_written,
    })
}

/// Files named by at least one candidate, for reporting.
pub fn candidate_files(memory: &InspectionMemory) -> BTreeSet<&str> {
    memory.candidates.iter().map(|c| c.location.file.as_str()).collect()
}
