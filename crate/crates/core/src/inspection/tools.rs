use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde_json::{json, Value};

use super::memory::{Candidate, CandidateLocation, Confidence, FileStatus, FlowNote, InspectionMemory, NarrativeStep};
use super::shared::SharedMemory;
use crate::code_facts::{
    analyze_data_flow, get_function_code, get_imports, ingest_sarif, list_files, search, CallRelation,
    FunctionSelector, RepoCheckout, SearchOptions,
};
use crate::llm::{ParamKind, ToolCallEnvelope, ToolRegistry, ToolSpec};
use crate::repo_semantics::{ModuleId, RepositorySemantics};
use crate::vuln_semantics::{ChainRole, VulnerabilitySemantics};

pub const MAX_SEARCH_HITS: usize = 200;
pub const MAX_READ_LINES: usize = 400;
const MAX_LIST_ENTRIES: usize = 500;
const EVIDENCE_LINES: usize = 20;
const FLOW_NOTE_EDGES: usize = 8;

pub const READ_FILE: &str = "read_file";
pub const GET_FUNCTION_CODE: &str = "get_function_code";
pub const SEARCH_IN_FILE: &str = "search_in_file";
pub const SEARCH_IN_FOLDER: &str = "search_in_folder";
pub const LIST_FILES_IN_FOLDER: &str = "list_files_in_folder";
pub const GET_IMPORTS: &str = "get_imports";
pub const ANALYZE_DATA_FLOW: &str = "analyze_data_flow";
pub const GET_RELATED_FILES: &str = "get_related_files";
pub const GET_MODULE_CALL_RELATIONSHIPS: &str = "get_module_call_relationships";
pub const READ_CODEQL_RESULTS: &str = "read_codeql_results";
pub const READ_SHARED_PUBLIC_MEMORY: &str = "read_shared_public_memory";
pub const REPORT_VULNERABILITY: &str = "report_vulnerability";
pub const MARK_FILE_COMPLETED: &str = "mark_file_completed";
pub const CHECK_FILE_STATUS: &str = "check_file_status";
pub const RECORD_REJECTED_HYPOTHESIS: &str = "record_rejected_hypothesis";
pub const FINISH_INSPECTION: &str = "finish_inspection";

/// The closed tool set offered to the inspection agent.
pub fn inspection_tools() -> ToolRegistry {
    use ParamKind::*;
    ToolRegistry::new([
        ToolSpec::new(READ_FILE, "Read a file with line numbers (at most 400 lines per call).")
            .required("path", String, "repo-relative file path")
            .optional("start_line", Integer, "first line, 1-based")
            .optional("end_line", Integer, "last line, inclusive"),
        ToolSpec::new(GET_FUNCTION_CODE, "Extract a function or class body with line numbers.")
            .required("path", String, "repo-relative file path")
            .optional("name", String, "qualified or simple name")
            .optional("line", Integer, "any line inside the definition"),
        ToolSpec::new(SEARCH_IN_FILE, "Regex search inside one file.")
            .required("path", String, "repo-relative file path")
            .required("pattern", String, "regular expression"),
        ToolSpec::new(SEARCH_IN_FOLDER, "Regex search under a folder (whole repository by default). At most 200 hits.")
            .required("pattern", String, "regular expression")
            .optional("folder", String, "repo-relative folder"),
        ToolSpec::new(LIST_FILES_IN_FOLDER, "List files under a folder.")
            .optional("folder", String, "repo-relative folder"),
        ToolSpec::new(GET_IMPORTS, "Modules imported by a file.").required("path", String, "repo-relative file path"),
        ToolSpec::new(ANALYZE_DATA_FLOW, "Intraprocedural data flow of one function (parameters, assignments, calls, returns).")
            .required("path", String, "repo-relative file path")
            .required("function", String, "function name"),
        ToolSpec::new(GET_RELATED_FILES, "Files connected to a file by static call relations.")
            .required("path", String, "repo-relative file path"),
        ToolSpec::new(GET_MODULE_CALL_RELATIONSHIPS, "Caller and callee modules of a module, or of the modules containing a file.")
            .optional("module", String, "module id")
            .optional("path", String, "repo-relative file path"),
        ToolSpec::new(READ_CODEQL_RESULTS, "Read SARIF findings supplied for this target.")
            .optional("path", String, "only results in this file"),
        ToolSpec::new(READ_SHARED_PUBLIC_MEMORY, "Observations from earlier inspections of this project.")
            .optional("scope", String, "module id"),
        ToolSpec::new(REPORT_VULNERABILITY, "Report a candidate variant with its location, source-to-sink path and evidence.")
            .required("file", String, "file containing the sink")
            .required("start_line", Integer, "first line of the sink span")
            .required("end_line", Integer, "last line of the sink span")
            .required("sink", String, "sensitive API reached, e.g. os.system")
            .required("path", Array, "steps {role: source|propagation|sink, file, function, line?, description?}, source first")
            .required("confidence", String, "low, medium or high")
            .optional("function", String, "function containing the sink")
            .optional("evidence", Array, "supporting code facts"),
        ToolSpec::new(MARK_FILE_COMPLETED, "Mark a file as fully inspected.")
            .required("path", String, "repo-relative file path")
            .required("reason", String, "why the file is done"),
        ToolSpec::new(CHECK_FILE_STATUS, "Status of a file, or overall progress and next pending files.")
            .optional("path", String, "repo-relative file path"),
        ToolSpec::new(RECORD_REJECTED_HYPOTHESIS, "Record a hypothesis that was checked and ruled out.")
            .required("note", String, "short note"),
        ToolSpec::new(FINISH_INSPECTION, "End the current turn.").optional("summary", String, "short summary"),
    ])
}

/// State change caused by a tool call, used by the engine for bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub enum ToolEffect {
    None,
    Completed(String),
    Candidate { id: String, merged: bool },
    SharedHit(usize),
    Rejected,
    Finish,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolResult {
    pub content: String,
    pub is_error: bool,
    pub effect: ToolEffect,
}

impl ToolResult {
    fn ok(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            is_error: false,
            effect: ToolEffect::None,
        }
    }

    fn err(msg: impl std::fmt::Display) -> Self {
        Self {
            content: format!("error: {msg}"),
            is_error: true,
            effect: ToolEffect::None,
        }
    }

    fn with(mut self, effect: ToolEffect) -> Self {
        self.effect = effect;
        self
    }
}

/// Read-only context the tools operate over.
pub struct InspectionEnv<'a> {
    pub target: &'a RepositorySemantics,
    pub vuln: &'a VulnerabilitySemantics,
    pub relations: &'a [CallRelation],
    pub shared: &'a SharedMemory,
    pub sarif: Option<&'a Path>,
}

impl InspectionEnv<'_> {
    fn checkout(&self) -> &RepoCheckout {
        &self.target.checkout
    }
}

fn str_arg<'v>(args: &'v Value, name: &str) -> Option<&'v str> {
    args.get(name).and_then(Value::as_str)
}

fn int_arg(args: &Value, name: &str) -> Option<usize> {
    args.get(name).and_then(Value::as_u64).map(|x| x as usize)
}

fn to_json(v: Value) -> String {
    serde_json::to_string(&v).expect("value serializes")
}

pub fn dispatch(env: &InspectionEnv<'_>, memory: &mut InspectionMemory, call: &ToolCallEnvelope) -> ToolResult {
    let args = &call.arguments;
    let path = match str_arg(args, "path").map(|p| env.checkout().relative(p)) {
        Some(Ok(p)) => Some(p),
        Some(Err(e)) => return ToolResult::err(e),
        None => None,
    };
    let path = path.as_deref();
    match call.name.as_str() {
        READ_FILE => read_file(env, memory, path.unwrap_or_default(), args),
        GET_FUNCTION_CODE => function_code(env, memory, path.unwrap_or_default(), args),
        SEARCH_IN_FILE => {
            let p = path.unwrap_or_default();
            memory.mark_in_progress(p);
            run_search(env, str_arg(args, "pattern").unwrap_or_default(), Some(p))
        }
        SEARCH_IN_FOLDER => run_search(env, str_arg(args, "pattern").unwrap_or_default(), str_arg(args, "folder")),
        LIST_FILES_IN_FOLDER => list_folder(env, str_arg(args, "folder")),
        GET_IMPORTS => match get_imports(env.checkout(), path.unwrap_or_default()) {
            Ok(list) => ToolResult::ok(to_json(json!({"imports": list.modules, "degraded": list.degraded}))),
            Err(e) => ToolResult::err(e),
        },
        ANALYZE_DATA_FLOW => data_flow(env, memory, path.unwrap_or_default(), str_arg(args, "function").unwrap_or_default()),
        GET_RELATED_FILES => related_files(env, memory, path.unwrap_or_default()),
        GET_MODULE_CALL_RELATIONSHIPS => module_relations(env, memory, str_arg(args, "module"), path),
        READ_CODEQL_RESULTS => codeql_results(env, path),
        READ_SHARED_PUBLIC_MEMORY => match env.shared.read(&env.target.checkout.project_name, str_arg(args, "scope")) {
            Ok(entries) => {
                let n = entries.len();
                let rows: Vec<Value> = entries
                    .iter()
                    .map(|e| json!({"scope": e.scope, "observation": e.observation, "run_id": e.run_id}))
                    .collect();
                ToolResult::ok(to_json(json!({"entries": rows}))).with(ToolEffect::SharedHit(n))
            }
            Err(e) => ToolResult::err(e),
        },
        REPORT_VULNERABILITY => report(env, memory, args),
        MARK_FILE_COMPLETED => {
            let p = path.unwrap_or_default();
            match memory.mark_completed(p, str_arg(args, "reason").unwrap_or_default()) {
                Ok(true) => ToolResult::ok(format!("{p} marked completed. {}", memory.progress_line()))
                    .with(ToolEffect::Completed(p.to_string())),
                Ok(false) => ToolResult::ok(format!("{p} was already completed")),
                Err(e) => ToolResult::err(e),
            }
        }
        CHECK_FILE_STATUS => file_status(memory, path),
        RECORD_REJECTED_HYPOTHESIS => {
            let note = str_arg(args, "note").unwrap_or_default().trim().to_string();
            if note.is_empty() {
                return ToolResult::err("note is empty");
            }
            memory.rejected_hypotheses.push(note);
            ToolResult::ok("recorded").with(ToolEffect::Rejected)
        }
        FINISH_INSPECTION => ToolResult::ok("turn finished").with(ToolEffect::Finish),
        other => ToolResult::err(format!("unknown tool `{other}`")),
    }
}

fn read_file(env: &InspectionEnv<'_>, memory: &mut InspectionMemory, path: &str, args: &Value) -> ToolResult {
    let text = match env.checkout().read_to_string(path) {
        Ok(t) => t,
        Err(e) => return ToolResult::err(e),
    };
    memory.mark_in_progress(path);
    let total = text.lines().count();
    let start = int_arg(args, "start_line").unwrap_or(1).max(1);
    let requested_end = int_arg(args, "end_line").unwrap_or(total).min(total);
    if start > total.max(1) {
        return ToolResult::err(format!("{path} has {total} lines"));
    }
    let end = requested_end.min(start + MAX_READ_LINES - 1);
    let body: Vec<String> = text
        .lines()
        .enumerate()
        .skip(start - 1)
        .take(end + 1 - start)
        .map(|(i, l)| format!("{:>5} | {l}", i + 1))
        .collect();
    let mut out = body.join("\n");
    if end < requested_end {
        out.push_str(&format!(
            "\n[truncated: lines {start}-{end} of {total} shown; continue with start_line={}]",
            end + 1
        ));
    }
    ToolResult::ok(out)
}

fn function_code(env: &InspectionEnv<'_>, memory: &mut InspectionMemory, path: &str, args: &Value) -> ToolResult {
    let selector = match (str_arg(args, "name"), int_arg(args, "line")) {
        (Some(n), _) => FunctionSelector::Name(n.to_string()),
        (None, Some(l)) => FunctionSelector::Line(l),
        (None, None) => return ToolResult::err("give `name` or `line`"),
    };
    match get_function_code(env.checkout(), path, &selector) {
        Ok(code) => {
            memory.mark_in_progress(path);
            let header = format!(
                "{}::{} lines {}-{}{}",
                code.fact.file,
                code.fact.qualified_name,
                code.fact.start_line,
                code.fact.end_line,
                if code.unparsed { " (unparsed, whole file)" } else { "" }
            );
            let lines: Vec<&str> = code.text.lines().collect();
            let mut body = lines.iter().take(MAX_READ_LINES).cloned().collect::<Vec<_>>().join("\n");
            if lines.len() > MAX_READ_LINES {
                body.push_str("\n[truncated; use read_file with start_line for the rest]");
            }
            ToolResult::ok(format!("{header}\n{body}"))
        }
        Err(e) => ToolResult::err(e),
    }
}

fn run_search(env: &InspectionEnv<'_>, pattern: &str, scope: Option<&str>) -> ToolResult {
    let opts = SearchOptions {
        max_hits: Some(MAX_SEARCH_HITS + 1),
        ..SearchOptions::default()
    };
    match search(env.checkout(), pattern, scope, opts) {
        Ok(mut hits) => {
            let truncated = hits.len() > MAX_SEARCH_HITS;
            hits.truncate(MAX_SEARCH_HITS);
            let rows: Vec<String> = hits.iter().map(|h| format!("{}:{}: {}", h.file, h.line, h.text)).collect();
            let mut out = if rows.is_empty() { "no matches".to_string() } else { rows.join("\n") };
            if truncated {
                out.push_str(&format!("\n[truncated at {MAX_SEARCH_HITS} hits; narrow the pattern or folder]"));
            }
            ToolResult::ok(out)
        }
        Err(e) => ToolResult::err(e),
    }
}

fn list_folder(env: &InspectionEnv<'_>, folder: Option<&str>) -> ToolResult {
    match list_files(env.checkout(), folder) {
        Ok(files) => {
            let n = files.len();
            let mut out = files.into_iter().take(MAX_LIST_ENTRIES).collect::<Vec<_>>().join("\n");
            if n > MAX_LIST_ENTRIES {
                out.push_str(&format!("\n[{n} files, first {MAX_LIST_ENTRIES} shown]"));
            }
            ToolResult::ok(out)
        }
        Err(e) => ToolResult::err(e),
    }
}

fn data_flow(env: &InspectionEnv<'_>, memory: &mut InspectionMemory, path: &str, function: &str) -> ToolResult {
    let code = match get_function_code(env.checkout(), path, &FunctionSelector::Name(function.to_string())) {
        Ok(c) => c,
        Err(e) => return ToolResult::err(e),
    };
    match analyze_data_flow(env.checkout(), &code.fact) {
        Ok(summary) => {
            memory.mark_in_progress(path);
            let edges: Vec<String> = summary
                .edges
                .iter()
                .map(|e| format!("{} -> {} ({:?})", e.from, e.to, e.via))
                .collect();
            if let Some(module) = memory.module_of.get(path).and_then(|m| m.first()).cloned() {
                let note = FlowNote {
                    module,
                    file: path.to_string(),
                    function: code.fact.qualified_name.clone(),
                    summary: edges.iter().take(FLOW_NOTE_EDGES).cloned().collect::<Vec<_>>().join("; "),
                };
                if !memory.flow_notes.contains(&note) {
                    memory.flow_notes.push(note);
                }
            }
            ToolResult::ok(to_json(json!({
                "function": format!("{}::{}", summary.function.file, summary.function.qualified_name),
                "unparsed": summary.unparsed,
                "edges": edges,
            })))
        }
        Err(e) => ToolResult::err(e),
    }
}

fn related_files(env: &InspectionEnv<'_>, memory: &InspectionMemory, path: &str) -> ToolResult {
    if !env.checkout().file_exists(path) {
        return ToolResult::err(format!("{path} does not exist"));
    }
    let mut calls_into = BTreeSet::new();
    let mut called_from = BTreeSet::new();
    for r in env.relations {
        let Some(callee) = &r.callee_resolved else { continue };
        if r.caller.file == path && callee.file != path {
            calls_into.insert(format!("{}::{}", callee.file, callee.qualified_name));
        }
        if callee.file == path && r.caller.file != path {
            called_from.insert(format!("{}::{} (line {})", r.caller.file, r.caller.qualified_name, r.call_site_line));
        }
    }
    let same_module: BTreeSet<&String> = memory
        .module_of
        .get(path)
        .into_iter()
        .flatten()
        .flat_map(|m| memory.module_of.iter().filter(move |(_, ms)| ms.contains(m)).map(|(f, _)| f))
        .filter(|f| f.as_str() != path)
        .collect();
    ToolResult::ok(to_json(json!({
        "calls_into": calls_into,
        "called_from": called_from,
        "same_module": same_module,
    })))
}

fn module_relations(
    env: &InspectionEnv<'_>,
    memory: &InspectionMemory,
    module: Option<&str>,
    path: Option<&str>,
) -> ToolResult {
    let ids: Vec<ModuleId> = match (module, path) {
        (Some(m), _) => vec![ModuleId(m.to_string())],
        (None, Some(p)) => memory.module_of.get(p).cloned().unwrap_or_default(),
        (None, None) => return ToolResult::err("give `module` or `path`"),
    };
    if ids.is_empty() {
        return ToolResult::err("file belongs to no module");
    }
    let graph = &env.target.graph;
    let mut out = BTreeMap::new();
    for id in ids {
        if !env.target.module_universe().contains(&id) {
            return ToolResult::err(format!("unknown module `{id}`"));
        }
        let callers: Vec<Value> = graph
            .edges
            .iter()
            .filter(|e| e.to == id)
            .map(|e| json!({"module": e.from, "calls": e.count}))
            .collect();
        let callees: Vec<Value> = graph
            .edges
            .iter()
            .filter(|e| e.from == id)
            .map(|e| json!({"module": e.to, "calls": e.count}))
            .collect();
        let priority = memory.priorities.priority_of(&id).map(|p| format!("{p:?}"));
        out.insert(id.0.clone(), json!({"priority": priority, "callers": callers, "callees": callees}));
    }
    ToolResult::ok(to_json(json!(out)))
}

fn codeql_results(env: &InspectionEnv<'_>, path: Option<&str>) -> ToolResult {
    let Some(sarif) = env.sarif else {
        return ToolResult::ok("no SARIF results were supplied for this target");
    };
    match ingest_sarif(sarif, Some(&env.target.checkout.root_path)) {
        Ok(results) => {
            let rows: Vec<String> = results
                .iter()
                .filter(|r| path.is_none_or(|p| r.file == p))
                .take(MAX_SEARCH_HITS)
                .map(|r| format!("{}:{}: [{}] {}", r.file, r.line, r.rule_id, r.message))
                .collect();
            ToolResult::ok(if rows.is_empty() { "no results".into() } else { rows.join("\n") })
        }
        Err(e) => ToolResult::err(e),
    }
}

fn file_status(memory: &InspectionMemory, path: Option<&str>) -> ToolResult {
    match path {
        Some(p) => match memory.file_status.get(p) {
            Some(FileStatus::Completed { reason, iteration }) => {
                ToolResult::ok(format!("{p}: completed in iteration {iteration} ({reason})"))
            }
            Some(FileStatus::InProgress) => ToolResult::ok(format!("{p}: in progress")),
            Some(FileStatus::Pending) => ToolResult::ok(format!("{p}: pending")),
            None => ToolResult::err(format!("{p} is not in the inspection scope")),
        },
        None => {
            let next: Vec<&str> = memory.remaining_in_order().into_iter().take(20).collect();
            ToolResult::ok(format!("{}\nnext pending: {}", memory.progress_line(), next.join(", ")))
        }
    }
}

fn parse_steps(v: &Value) -> Result<Vec<NarrativeStep>, String> {
    let steps: Vec<NarrativeStep> =
        serde_json::from_value(v.clone()).map_err(|e| format!("`path` steps are malformed: {e}"))?;
    if steps.len() < 2 {
        return Err("`path` needs at least a source step and a sink step".into());
    }
    if steps[0].role != ChainRole::Source {
        return Err("the first `path` step must have role source".into());
    }
    if steps.last().map(|s| s.role) != Some(ChainRole::Sink) {
        return Err("the last `path` step must have role sink".into());
    }
    Ok(steps)
}

fn report(env: &InspectionEnv<'_>, memory: &mut InspectionMemory, args: &Value) -> ToolResult {
    let checkout = env.checkout();
    let file = match checkout.relative(str_arg(args, "file").unwrap_or_default()) {
        Ok(f) => f,
        Err(e) => return ToolResult::err(e),
    };
    let text = match checkout.read_to_string(&file) {
        Ok(t) if checkout.file_exists(&file) => t,
        Ok(_) => return ToolResult::err(format!("{file} does not exist")),
        Err(e) => return ToolResult::err(e),
    };
    let total = text.lines().count();
    let (start, end) = (
        int_arg(args, "start_line").unwrap_or(0),
        int_arg(args, "end_line").unwrap_or(0),
    );
    if start == 0 || start > end || end > total {
        return ToolResult::err(format!("line span {start}-{end} does not resolve in {file} ({total} lines)"));
    }
    let function = str_arg(args, "function").map(str::to_string);
    if let Some(f) = &function {
        if let Err(e) = get_function_code(checkout, &file, &FunctionSelector::Name(f.clone())) {
            return ToolResult::err(e);
        }
    }
    let steps = match parse_steps(args.get("path").unwrap_or(&Value::Null)) {
        Ok(s) => s,
        Err(e) => return ToolResult::err(e),
    };
    let confidence = match str_arg(args, "confidence").unwrap_or_default() {
        "low" => Confidence::Low,
        "medium" => Confidence::Medium,
        "high" => Confidence::High,
        other => return ToolResult::err(format!("confidence `{other}` must be low, medium or high")),
    };
    let sink = str_arg(args, "sink").unwrap_or_default().trim().to_string();
    if sink.is_empty() {
        return ToolResult::err("`sink` is empty");
    }
    let mut evidence: Vec<String> = args
        .get("evidence")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
        .unwrap_or_default();
    let excerpt: Vec<String> = text
        .lines()
        .enumerate()
        .skip(start - 1)
        .take((end + 1 - start).min(EVIDENCE_LINES))
        .map(|(i, l)| format!("{:>5} | {l}", i + 1))
        .collect();
    evidence.push(format!("{file}:{start}-{end}\n{}", excerpt.join("\n")));
    let candidate = Candidate {
        id: String::new(),
        location: CandidateLocation {
            file: file.clone(),
            start_line: start,
            end_line: end,
            function,
        },
        path_narrative: steps,
        sink,
        static_evidence: evidence,
        confidence,
        reference_advisory: env.vuln.advisory_id.clone(),
        reported_iteration: memory.iteration_count,
    };
    let (id, merged) = memory.add_candidate(candidate);
    let msg = if merged {
        format!("merged into existing candidate {id}")
    } else {
        format!("recorded candidate {id}")
    };
    ToolResult::ok(msg).with(ToolEffect::Candidate { id, merged })
}
