use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ModuleDescriptor, ModuleId};
use crate::code_facts::{is_source_file, list_files, CodeFactsError, CodeIndex, RepoCheckout};
use crate::llm::{Gateway, Message, Stage, Usage};
use crate::taxonomy::{Role, RoleTaxonomy};

pub const ASSIGNMENT_PROMPT_ID: &str = "module-assignment";
pub const ASSIGNMENT_BATCH_SIZE: usize = 20;
/// A role with more files than this is split by top-level package.
pub const MODULE_SPLIT_THRESHOLD: usize = 200;

const SNIPPET_LINES: usize = 40;
const SNIPPET_CHARS: usize = 1500;
const MAX_FUNCS_PER_MODULE: usize = 40;
const MAX_NOTES_CHARS: usize = 600;

/// Path keyword → role table used by the heuristic pass.
const KEYWORDS: &[(&str, &str, &str)] = &[
    // UI and Workflows
    ("webui", "UI and Workflows", "Web UI"),
    ("web_ui", "UI and Workflows", "Web UI"),
    ("ui", "UI and Workflows", "Web UI"),
    ("gui", "UI and Workflows", "Web UI"),
    ("frontend", "UI and Workflows", "Web UI"),
    ("gradio", "UI and Workflows", "Web UI"),
    ("streamlit", "UI and Workflows", "Web UI"),
    ("workflow", "UI and Workflows", "Workflow Builder"),
    ("workflows", "UI and Workflows", "Workflow Builder"),
    ("cli", "UI and Workflows", "CLI/Developer Workflows"),
    ("cmd", "UI and Workflows", "CLI/Developer Workflows"),
    ("commands", "UI and Workflows", "CLI/Developer Workflows"),
    ("scripts", "UI and Workflows", "CLI/Developer Workflows"),
    ("examples", "UI and Workflows", "Templates/Examples"),
    ("example", "UI and Workflows", "Templates/Examples"),
    ("templates", "UI and Workflows", "Templates/Examples"),
    ("demo", "UI and Workflows", "Templates/Examples"),
    ("demos", "UI and Workflows", "Templates/Examples"),
    ("recipes", "UI and Workflows", "Templates/Examples"),
    // Serving and Deployment
    ("serving", "Serving and Deployment", "Serving API"),
    ("serve", "Serving and Deployment", "Serving API"),
    ("server", "Serving and Deployment", "Serving API"),
    ("api", "Serving and Deployment", "Serving API"),
    ("endpoints", "Serving and Deployment", "Serving API"),
    ("routes", "Serving and Deployment", "Serving API"),
    ("deploy", "Serving and Deployment", "Deployment Assets"),
    ("deployment", "Serving and Deployment", "Deployment Assets"),
    ("docker", "Serving and Deployment", "Deployment Assets"),
    ("helm", "Serving and Deployment", "Deployment Assets"),
    ("k8s", "Serving and Deployment", "Deployment Assets"),
    ("router", "Serving and Deployment", "Autoscaling/Routing"),
    ("routing", "Serving and Deployment", "Autoscaling/Routing"),
    ("autoscaling", "Serving and Deployment", "Autoscaling/Routing"),
    ("auth", "Serving and Deployment", "Authentication/Rate Limiting"),
    ("ratelimit", "Serving and Deployment", "Authentication/Rate Limiting"),
    ("tenant", "Serving and Deployment", "Multi Tenant Isolation"),
    ("tenants", "Serving and Deployment", "Multi Tenant Isolation"),
    // Training and Optimization
    ("train", "Training and Optimization", "Training Loop"),
    ("training", "Training and Optimization", "Training Loop"),
    ("trainer", "Training and Optimization", "Training Loop"),
    ("trainers", "Training and Optimization", "Training Loop"),
    ("distributed", "Training and Optimization", "Distributed Training"),
    ("fsdp", "Training and Optimization", "Distributed Training"),
    ("deepspeed", "Training and Optimization", "Distributed Training"),
    ("optim", "Training and Optimization", "Optimizer Schedules"),
    ("optimizer", "Training and Optimization", "Optimizer Schedules"),
    ("optimizers", "Training and Optimization", "Optimizer Schedules"),
    ("scheduler", "Training and Optimization", "Optimizer Schedules"),
    ("checkpoint", "Training and Optimization", "Checkpoint/Finetuning"),
    ("checkpoints", "Training and Optimization", "Checkpoint/Finetuning"),
    ("checkpointing", "Training and Optimization", "Checkpoint/Finetuning"),
    ("ckpt", "Training and Optimization", "Checkpoint/Finetuning"),
    ("configs", "Training and Optimization", "Experiment Configurations"),
    ("hparams", "Training and Optimization", "Experiment Configurations"),
    ("experiments", "Training and Optimization", "Experiment Configurations"),
    // Post-Training and Alignment
    ("sft", "Post-Training and Alignment", "Supervised Finetuning"),
    ("finetune", "Post-Training and Alignment", "Supervised Finetuning"),
    ("peft", "Post-Training and Alignment", "Parameter Efficient Finetuning"),
    ("lora", "Post-Training and Alignment", "Parameter Efficient Finetuning"),
    ("adapters", "Post-Training and Alignment", "Parameter Efficient Finetuning"),
    ("tuners", "Post-Training and Alignment", "Parameter Efficient Finetuning"),
    ("dpo", "Post-Training and Alignment", "Preference Learning"),
    ("kto", "Post-Training and Alignment", "Preference Learning"),
    ("orpo", "Post-Training and Alignment", "Preference Learning"),
    ("rlhf", "Post-Training and Alignment", "RLHF/RLAIF"),
    ("ppo", "Post-Training and Alignment", "RLHF/RLAIF"),
    ("grpo", "Post-Training and Alignment", "RLHF/RLAIF"),
    ("reward", "Post-Training and Alignment", "RLHF/RLAIF"),
    ("distill", "Post-Training and Alignment", "Distillation/Quantization Aware Training"),
    ("distillation", "Post-Training and Alignment", "Distillation/Quantization Aware Training"),
    ("qat", "Post-Training and Alignment", "Distillation/Quantization Aware Training"),
    // Model Assets and Loading
    ("models", "Model Assets and Loading", "Model Definition"),
    ("modeling", "Model Assets and Loading", "Model Definition"),
    ("architectures", "Model Assets and Loading", "Model Definition"),
    ("safetensors", "Model Assets and Loading", "Checkpoint Formats"),
    ("gguf", "Model Assets and Loading", "Checkpoint Formats"),
    ("formats", "Model Assets and Loading", "Checkpoint Formats"),
    ("loader", "Model Assets and Loading", "Loading Configuration"),
    ("loaders", "Model Assets and Loading", "Loading Configuration"),
    ("loading", "Model Assets and Loading", "Loading Configuration"),
    ("hub", "Model Assets and Loading", "Loading Configuration"),
    ("tokenizer", "Model Assets and Loading", "Tokenizers/Processors"),
    ("tokenizers", "Model Assets and Loading", "Tokenizers/Processors"),
    ("processors", "Model Assets and Loading", "Tokenizers/Processors"),
    ("export", "Model Assets and Loading", "Export Interchange"),
    ("onnx", "Model Assets and Loading", "Export Interchange"),
    ("convert", "Model Assets and Loading", "Export Interchange"),
    ("conversion", "Model Assets and Loading", "Export Interchange"),
    // Inference and Acceleration
    ("inference", "Inference and Acceleration", "Inference Runtime"),
    ("infer", "Inference and Acceleration", "Inference Runtime"),
    ("generation", "Inference and Acceleration", "Inference Runtime"),
    ("engine", "Inference and Acceleration", "Inference Runtime"),
    ("kvcache", "Inference and Acceleration", "KV Cache/Memory"),
    ("kv_cache", "Inference and Acceleration", "KV Cache/Memory"),
    ("parallel", "Inference and Acceleration", "Inference Parallelism"),
    ("kernels", "Inference and Acceleration", "Quantized Kernels"),
    ("kernel", "Inference and Acceleration", "Quantized Kernels"),
    ("quantization", "Inference and Acceleration", "Quantized Kernels"),
    ("triton", "Inference and Acceleration", "Quantized Kernels"),
    ("benchmark", "Inference and Acceleration", "Performance Benchmarking"),
    ("benchmarks", "Inference and Acceleration", "Performance Benchmarking"),
    ("bench", "Inference and Acceleration", "Performance Benchmarking"),
    // Platform Systems
    ("setup", "Platform Systems", "Build Packaging"),
    ("packaging", "Platform Systems", "Build Packaging"),
    ("build", "Platform Systems", "Build Packaging"),
    ("hardware", "Platform Systems", "Runtime Hardware"),
    ("device", "Platform Systems", "Runtime Hardware"),
    ("devices", "Platform Systems", "Runtime Hardware"),
    ("accelerator", "Platform Systems", "Runtime Hardware"),
    ("launcher", "Platform Systems", "Distributed Orchestration"),
    ("cluster", "Platform Systems", "Distributed Orchestration"),
    ("orchestration", "Platform Systems", "Distributed Orchestration"),
    ("slurm", "Platform Systems", "Distributed Orchestration"),
    // Data Knowledge
    ("ingest", "Data Knowledge", "Ingestion Connectors"),
    ("ingestion", "Data Knowledge", "Ingestion Connectors"),
    ("connectors", "Data Knowledge", "Ingestion Connectors"),
    ("readers", "Data Knowledge", "Ingestion Connectors"),
    ("data", "Data Knowledge", "Dataset Construction"),
    ("dataset", "Data Knowledge", "Dataset Construction"),
    ("datasets", "Data Knowledge", "Dataset Construction"),
    ("preprocess", "Data Knowledge", "Preprocess Tokenization"),
    ("preprocessing", "Data Knowledge", "Preprocess Tokenization"),
    ("collator", "Data Knowledge", "Preprocess Tokenization"),
    ("storage", "Data Knowledge", "Storage Formats"),
    ("vectorstores", "Data Knowledge", "Knowledge Stores"),
    ("vector_stores", "Data Knowledge", "Knowledge Stores"),
    ("knowledge", "Data Knowledge", "Knowledge Stores"),
    // RAG and Retrieval
    ("rag", "RAG and Retrieval", "Retrieval/Reranking"),
    ("retrieval", "RAG and Retrieval", "Retrieval/Reranking"),
    ("retriever", "RAG and Retrieval", "Retrieval/Reranking"),
    ("retrievers", "RAG and Retrieval", "Retrieval/Reranking"),
    ("rerank", "RAG and Retrieval", "Retrieval/Reranking"),
    ("reranker", "RAG and Retrieval", "Retrieval/Reranking"),
    ("chunking", "RAG and Retrieval", "Document Loaders/Chunking"),
    ("splitter", "RAG and Retrieval", "Document Loaders/Chunking"),
    ("text_splitter", "RAG and Retrieval", "Document Loaders/Chunking"),
    ("embeddings", "RAG and Retrieval", "Embedding/Indexing"),
    ("indexing", "RAG and Retrieval", "Embedding/Indexing"),
    ("indices", "RAG and Retrieval", "Embedding/Indexing"),
    ("citation", "RAG and Retrieval", "Citation Attribution"),
    ("citations", "RAG and Retrieval", "Citation Attribution"),
    ("hybrid", "RAG and Retrieval", "Hybrid Search"),
    ("bm25", "RAG and Retrieval", "Hybrid Search"),
    // Agents and Tooling
    ("tools", "Agents and Tooling", "Tool/Function Calling"),
    ("tool", "Agents and Tooling", "Tool/Function Calling"),
    ("function_calling", "Agents and Tooling", "Tool/Function Calling"),
    ("agent", "Agents and Tooling", "Planning/Orchestration"),
    ("agents", "Agents and Tooling", "Planning/Orchestration"),
    ("planner", "Agents and Tooling", "Planning/Orchestration"),
    ("planning", "Agents and Tooling", "Planning/Orchestration"),
    ("memory", "Agents and Tooling", "Memory State"),
    ("plugins", "Agents and Tooling", "Integrations/Plugins"),
    ("plugin", "Agents and Tooling", "Integrations/Plugins"),
    ("integrations", "Agents and Tooling", "Integrations/Plugins"),
    ("extensions", "Agents and Tooling", "Integrations/Plugins"),
    // Evaluation and Benchmarking
    ("eval", "Evaluation and Benchmarking", "Quality Evaluation"),
    ("evals", "Evaluation and Benchmarking", "Quality Evaluation"),
    ("evaluation", "Evaluation and Benchmarking", "Quality Evaluation"),
    ("safety", "Evaluation and Benchmarking", "Safety Evaluation"),
    ("redteam", "Evaluation and Benchmarking", "Safety Evaluation"),
    ("tests", "Evaluation and Benchmarking", "Regression Tests"),
    ("test", "Evaluation and Benchmarking", "Regression Tests"),
    ("testing", "Evaluation and Benchmarking", "Regression Tests"),
    // Observability and LLMOps
    ("tracking", "Observability and LLMOps", "Experiment Tracking"),
    ("wandb", "Observability and LLMOps", "Experiment Tracking"),
    ("mlflow", "Observability and LLMOps", "Experiment Tracking"),
    ("registry", "Observability and LLMOps", "Model Registry"),
    ("logging", "Observability and LLMOps", "Tracing/Metrics/Logs"),
    ("tracing", "Observability and LLMOps", "Tracing/Metrics/Logs"),
    ("telemetry", "Observability and LLMOps", "Tracing/Metrics/Logs"),
    ("metrics", "Observability and LLMOps", "Tracing/Metrics/Logs"),
    ("monitoring", "Observability and LLMOps", "Tracing/Metrics/Logs"),
    ("ci", "Observability and LLMOps", "CI/CD Governance"),
    (".github", "Observability and LLMOps", "CI/CD Governance"),
];

fn keyword_role(token: &str) -> Option<Role> {
    KEYWORDS
        .iter()
        .find(|(k, _, _)| *k == token)
        .map(|(_, c, s)| Role::new(c, s))
}

fn segment_roles(segment: &str, hits: &mut BTreeMap<Role, BTreeSet<String>>) {
    let lower = segment.to_ascii_lowercase();
    let mut tokens = vec![lower.clone()];
    tokens.extend(
        lower
            .split(['_', '-', '.'])
            .filter(|t| !t.is_empty() && *t != lower)
            .map(str::to_string),
    );
    for t in tokens {
        if let Some(role) = keyword_role(&t) {
            hits.entry(role).or_default().insert(t);
        }
    }
}

/// Candidate roles from path segments. Directory names decide; the file stem
/// is consulted only when no directory matched. The result is confident iff
/// it holds exactly one role.
pub fn heuristic_roles(path: &str) -> BTreeMap<Role, BTreeSet<String>> {
    let parts: Vec<&str> = path.split('/').collect();
    let (file, dirs) = parts.split_last().expect("split yields at least one part");
    let mut hits = BTreeMap::new();
    for d in dirs {
        segment_roles(d, &mut hits);
    }
    if hits.is_empty() {
        let stem = file.rsplit_once('.').map(|(s, _)| s).unwrap_or(file);
        segment_roles(stem, &mut hits);
    }
    hits
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentPass {
    Heuristic,
    Backend,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileAssignment {
    pub file: String,
    pub roles: Vec<Role>,
    pub pass: AssignmentPass,
    pub evidence: String,
}

#[derive(Debug, Clone, Default)]
pub struct Assignment {
    pub modules: Vec<ModuleDescriptor>,
    pub unassigned: Vec<String>,
    pub files: Vec<FileAssignment>,
    pub diagnostics: Vec<String>,
    pub usage: Usage,
}

fn snippet(checkout: &RepoCheckout, file: &str) -> String {
    let text = checkout.read_to_string(file).unwrap_or_default();
    let head: String = text.lines().take(SNIPPET_LINES).collect::<Vec<_>>().join("\n");
    head.chars().take(SNIPPET_CHARS).collect()
}

struct BackendAssignment {
    file: String,
    roles: Vec<Role>,
    notes: String,
}

fn parse_batch_reply(v: &Value) -> Result<Vec<BackendAssignment>, String> {
    let items = v
        .get("assignments")
        .and_then(Value::as_array)
        .ok_or("missing `assignments` array")?;
    let mut out = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let file = item
            .get("file")
            .and_then(Value::as_str)
            .ok_or(format!("assignments[{i}].file missing"))?;
        let roles = item
            .get("roles")
            .and_then(Value::as_array)
            .ok_or(format!("assignments[{i}].roles missing"))?
            .iter()
            .map(|r| {
                let coarse = r.get("coarse").and_then(Value::as_str);
                let second = r.get("second").and_then(Value::as_str);
                match (coarse, second) {
                    (Some(c), Some(s)) => Ok(Role::new(c, s)),
                    _ => Err(format!("assignments[{i}].roles needs coarse/second strings")),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let notes = item
            .get("notes")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        out.push(BackendAssignment {
            file: file.to_string(),
            roles,
            notes,
        });
    }
    Ok(out)
}

fn batch_prompt(checkout: &RepoCheckout, taxonomy: &RoleTaxonomy, batch: &[String]) -> Vec<Message> {
    let mut body = String::from(
        "Assign each file below to one or more module roles from the taxonomy. \
         Use only roles listed. Reply with JSON: \
         {\"assignments\": [{\"file\": \"<path>\", \"roles\": [{\"coarse\": \"...\", \"second\": \"...\"}], \"notes\": \"<short functional note>\"}]}\n\n",
    );
    body.push_str("Taxonomy:\n");
    body.push_str(&taxonomy.render());
    for file in batch {
        body.push_str(&format!("\n### {file}\n```\n{}\n```\n", snippet(checkout, file)));
    }
    vec![
        Message::system(format!(
            "You classify source files of the repository {} into functional module roles.",
            checkout.project_name
        )),
        Message::user(body),
    ]
}

/// Two-pass, taxonomy-constrained assignment of source files to modules.
pub fn assign_modules(
    checkout: &RepoCheckout,
    index: &CodeIndex,
    taxonomy: &RoleTaxonomy,
    gateway: &Gateway,
) -> Result<Assignment, CodeFactsError> {
    let sources: Vec<String> = list_files(checkout, None)?
        .into_iter()
        .filter(|f| is_source_file(f))
        .collect();
    let mut out = Assignment::default();
    let mut ambiguous = Vec::new();

    for file in &sources {
        let hits = heuristic_roles(file);
        if hits.len() == 1 {
            let (role, kws) = hits.into_iter().next().expect("len checked");
            out.files.push(FileAssignment {
                file: file.clone(),
                roles: vec![role],
                pass: AssignmentPass::Heuristic,
                evidence: format!(
                    "path keywords: {}",
                    kws.into_iter().collect::<Vec<_>>().join(", ")
                ),
            });
        } else {
            ambiguous.push(file.clone());
        }
    }

    for batch in ambiguous.chunks(ASSIGNMENT_BATCH_SIZE) {
        let messages = batch_prompt(checkout, taxonomy, batch);
        match gateway.complete_structured(Stage::Profiling, ASSIGNMENT_PROMPT_ID, &messages, parse_batch_reply) {
            Err(e) => {
                out.diagnostics
                    .push(format!("module assignment batch failed ({e}); {} files left unassigned", batch.len()));
                out.unassigned.extend(batch.iter().cloned());
            }
            Ok((replies, usage)) => {
                out.usage.add(usage);
                for file in batch {
                    let Some(reply) = replies.iter().find(|r| &r.file == file) else {
                        out.diagnostics.push(format!("{file}: backend returned no assignment"));
                        out.unassigned.push(file.clone());
                        continue;
                    };
                    let mut roles = Vec::new();
                    for role in &reply.roles {
                        if taxonomy.contains(role) {
                            if !roles.contains(role) {
                                roles.push(role.clone());
                            }
                        } else {
                            out.diagnostics
                                .push(format!("{file}: backend proposed unknown role {role}"));
                        }
                    }
                    if roles.is_empty() {
                        out.unassigned.push(file.clone());
                    } else {
                        out.files.push(FileAssignment {
                            file: file.clone(),
                            roles,
                            pass: AssignmentPass::Backend,
                            evidence: reply.notes.clone(),
                        });
                    }
                }
                for r in &replies {
                    if !batch.contains(&r.file) {
                        out.diagnostics
                            .push(format!("backend assigned {} which was not in the batch", r.file));
                    }
                }
            }
        }
    }
    out.files.sort_by(|a, b| a.file.cmp(&b.file));
    out.unassigned.sort();
    out.modules = build_descriptors(&out.files, index);
    Ok(out)
}

fn top_package(file: &str) -> &str {
    match file.split_once('/') {
        Some((head, _)) => head,
        None => "(root)",
    }
}

fn build_descriptors(files: &[FileAssignment], index: &CodeIndex) -> Vec<ModuleDescriptor> {
    let mut by_role: BTreeMap<Role, Vec<&FileAssignment>> = BTreeMap::new();
    for fa in files {
        for role in &fa.roles {
            by_role.entry(role.clone()).or_default().push(fa);
        }
    }
    let top_level = index.top_level();
    let mut modules = Vec::new();
    for (role, members) in by_role {
        let groups: Vec<(Option<&str>, Vec<&FileAssignment>)> = if members.len() > MODULE_SPLIT_THRESHOLD {
            let mut split: BTreeMap<&str, Vec<&FileAssignment>> = BTreeMap::new();
            for fa in &members {
                split.entry(top_package(&fa.file)).or_default().push(fa);
            }
            split.into_iter().map(|(k, v)| (Some(k), v)).collect()
        } else {
            vec![(None, members)]
        };
        for (package, group) in groups {
            let (id, label) = match package {
                Some(p) => (ModuleId(format!("{} [{p}]", role.rendered())), format!("{} [{p}]", role.second)),
                None => (ModuleId::for_role(&role), role.second.clone()),
            };
            let files: BTreeSet<String> = group.iter().map(|fa| fa.file.clone()).collect();
            let funcs = files
                .iter()
                .flat_map(|f| top_level.get(f.as_str()).into_iter().flatten())
                .take(MAX_FUNCS_PER_MODULE)
                .map(|f| f.to_ref())
                .collect();
            let deps = files
                .iter()
                .filter_map(|f| index.file(f))
                .flat_map(|p| p.imports.iter())
                .filter_map(|m| m.split('.').next())
                .filter(|m| !m.is_empty())
                .map(str::to_string)
                .collect();
            let mut notes: Vec<&str> = Vec::new();
            for fa in &group {
                if !fa.evidence.is_empty() && !notes.contains(&fa.evidence.as_str()) {
                    notes.push(&fa.evidence);
                }
            }
            let feature_notes: String = notes.join("; ").chars().take(MAX_NOTES_CHARS).collect();
            modules.push(ModuleDescriptor {
                id,
                role: role.clone(),
                label,
                files,
                funcs,
                deps,
                feature_notes,
            });
        }
    }
    modules
}
