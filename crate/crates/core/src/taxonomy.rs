//! Two-level module role vocabulary for AI infrastructure repositories.

use std::fmt;

use serde::{Deserialize, Serialize};

/// A (coarse category, second-level role) pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Role {
    pub coarse: String,
    pub second: String,
}

impl Role {
    pub fn new(coarse: &str, second: &str) -> Self {
        Self {
            coarse: coarse.to_string(),
            second: second.to_string(),
        }
    }

    /// Canonical rendering, `"coarse :: second-level"`.
    pub fn rendered(&self) -> String {
        format!("{} :: {}", self.coarse, self.second)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} :: {}", self.coarse, self.second)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleCategory {
    pub name: String,
    pub definition: String,
    pub roles: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleTaxonomy {
    pub categories: Vec<RoleCategory>,
}

const BUILTIN: &[(&str, &str, &[&str])] = &[
    (
        "Platform Systems",
        "Build, package, configure, and orchestrate the runtime substrate for local, containerized, or distributed AI workloads.",
        &["Build Packaging", "Runtime Hardware", "Distributed Orchestration"],
    ),
    (
        "Data Knowledge",
        "Ingest, normalize, chunk, store, and retrieve datasets or external knowledge used by models and applications.",
        &[
            "Ingestion Connectors",
            "Dataset Construction",
            "Preprocess Tokenization",
            "Storage Formats",
            "Knowledge Stores",
        ],
    ),
    (
        "Model Assets and Loading",
        "Define model assets and loading paths, including architectures, checkpoints, tokenizers, processors, and runtime configuration.",
        &[
            "Model Definition",
            "Checkpoint Formats",
            "Loading Configuration",
            "Tokenizers/Processors",
            "Export Interchange",
        ],
    ),
    (
        "Training and Optimization",
        "Run training loops, distributed optimization, checkpointing, and experiment configuration.",
        &[
            "Training Loop",
            "Distributed Training",
            "Optimizer Schedules",
            "Checkpoint/Finetuning",
            "Experiment Configurations",
        ],
    ),
    (
        "Post-Training and Alignment",
        "Adapt pretrained models through supervised finetuning, PEFT, preference optimization, RLHF/RLAIF, or distillation style procedures.",
        &[
            "Supervised Finetuning",
            "Parameter Efficient Finetuning",
            "Preference Learning",
            "RLHF/RLAIF",
            "Distillation/Quantization Aware Training",
        ],
    ),
    (
        "Inference and Acceleration",
        "Execute trained models efficiently through inference runtimes, cache and memory control, parallelism, kernels, and performance measurement.",
        &[
            "Inference Runtime",
            "KV Cache/Memory",
            "Inference Parallelism",
            "Quantized Kernels",
            "Performance Benchmarking",
        ],
    ),
    (
        "Serving and Deployment",
        "Expose models or AI workflows through APIs, deployable services, routing, authentication, and runtime boundaries.",
        &[
            "Serving API",
            "Deployment Assets",
            "Autoscaling/Routing",
            "Authentication/Rate Limiting",
            "Multi Tenant Isolation",
        ],
    ),
    (
        "RAG and Retrieval",
        "Build retrieval pipelines that load documents, create embedding indexes, retrieve and rerank context, and attach citations.",
        &[
            "Document Loaders/Chunking",
            "Embedding/Indexing",
            "Retrieval/Reranking",
            "Citation Attribution",
            "Hybrid Search",
        ],
    ),
    (
        "Agents and Tooling",
        "Implement agent control loops, tool or function calling, planning orchestration, memory state, and plugin integrations.",
        &[
            "Tool/Function Calling",
            "Planning/Orchestration",
            "Memory State",
            "Integrations/Plugins",
        ],
    ),
    (
        "Evaluation and Benchmarking",
        "Measure quality, safety, performance, and regression behavior for models, pipelines, or applications.",
        &[
            "Quality Evaluation",
            "Safety Evaluation",
            "Performance Evaluation",
            "Regression Tests",
        ],
    ),
    (
        "Observability and LLMOps",
        "Track experiments, register models, collect traces, metrics, and logs, and support CI/CD or governance workflows.",
        &[
            "Experiment Tracking",
            "Model Registry",
            "Tracing/Metrics/Logs",
            "CI/CD Governance",
        ],
    ),
    (
        "UI and Workflows",
        "Provide web interfaces, workflow builders, CLI/developer workflows, templates, and examples.",
        &[
            "Web UI",
            "Workflow Builder",
            "CLI/Developer Workflows",
            "Templates/Examples",
        ],
    ),
];

impl RoleTaxonomy {
    /// The shipped twelve-category vocabulary.
    pub fn builtin() -> Self {
        Self {
            categories: BUILTIN
                .iter()
                .map(|(name, def, roles)| RoleCategory {
                    name: name.to_string(),
                    definition: def.to_string(),
                    roles: roles.iter().map(|r| r.to_string()).collect(),
                })
                .collect(),
        }
    }

    pub fn contains(&self, role: &Role) -> bool {
        self.categories
            .iter()
            .any(|c| c.name == role.coarse && c.roles.iter().any(|r| r == &role.second))
    }

    pub fn roles(&self) -> impl Iterator<Item = Role> + '_ {
        self.categories
            .iter()
            .flat_map(|c| c.roles.iter().map(move |r| Role::new(&c.name, r)))
    }

    pub fn category(&self, coarse: &str) -> Option<&RoleCategory> {
        self.categories.iter().find(|c| c.name == coarse)
    }

    /// Coarse names unique; 1–5 second-level roles per category.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.categories {
            if !seen.insert(c.name.as_str()) {
                return Err(format!("duplicate category {}", c.name));
            }
            if c.roles.is_empty() || c.roles.len() > 5 {
                return Err(format!("{} has {} second-level roles", c.name, c.roles.len()));
            }
        }
        Ok(())
    }

    /// Prompt-ready listing, one role per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.categories {
            out.push_str(&format!("- {}: {}\n", c.name, c.definition));
            for r in &c.roles {
                out.push_str(&format!("    * {} :: {}\n", c.name, r));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_is_valid() {
        let t = RoleTaxonomy::builtin();
        t.validate().unwrap();
        assert_eq!(t.categories.len(), 12);
        assert_eq!(t.roles().count(), 54);
        assert!(t.contains(&Role::new("UI and Workflows", "Web UI")));
        assert!(!t.contains(&Role::new("UI and Workflows", "Checkpoint Formats")));
    }

    #[test]
    fn rendering() {
        assert_eq!(
            Role::new("Model Assets and Loading", "Loading Configuration").to_string(),
            "Model Assets and Loading :: Loading Configuration"
        );
    }
}
