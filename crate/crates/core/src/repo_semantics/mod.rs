//! Repository semantics: taxonomy-constrained modules, per-module
//! descriptors, the module call graph and a compact repository summary.

mod assign;
mod graph;
mod stdlib;
mod summary;

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::code_facts::{CodeFactsError, CodeIndex, FunctionRef, RepoCheckout};
use crate::llm::{Gateway, Usage};
use crate::store::{self, StoreError};
use crate::taxonomy::{Role, RoleTaxonomy};

pub use assign::{
    assign_modules, heuristic_roles, Assignment, AssignmentPass, FileAssignment,
    ASSIGNMENT_BATCH_SIZE, ASSIGNMENT_PROMPT_ID, MODULE_SPLIT_THRESHOLD,
};
pub use graph::{build_module_graph, ModuleCallGraph, ModuleEdge};
pub use summary::{key_dependencies, summarize_repository, SUMMARY_PROMPT_ID};

/// Identifier of a module within one repository revision.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModuleId(pub String);

impl ModuleId {
    /// Pseudo-module collecting files no pass could assign.
    pub fn unassigned() -> Self {
        ModuleId("unassigned".to_string())
    }

    pub fn for_role(role: &Role) -> Self {
        ModuleId(role.rendered())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleDescriptor {
    pub id: ModuleId,
    pub role: Role,
    pub label: String,
    pub files: BTreeSet<String>,
    /// Important top-level functions and classes.
    pub funcs: Vec<FunctionRef>,
    pub deps: BTreeSet<String>,
    pub feature_notes: String,
}

impl ModuleDescriptor {
    /// Text compared against affected-role names for embedding promotion.
    pub fn descriptor_text(&self) -> String {
        [self.label.as_str(), &self.role.rendered(), self.feature_notes.as_str()]
            .iter()
            .filter(|s| !s.trim().is_empty())
            .cloned()
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepositorySummary {
    pub description: String,
    pub application_scenario: String,
    pub target_user: String,
    pub key_dependencies: BTreeSet<String>,
    /// Text fields were synthesized from module labels, not by the backend.
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepositorySemantics {
    pub checkout: RepoCheckout,
    pub summary: RepositorySummary,
    pub modules: Vec<ModuleDescriptor>,
    pub unassigned: Vec<String>,
    pub assignments: Vec<FileAssignment>,
    pub graph: ModuleCallGraph,
    pub token_usage: Usage,
    pub diagnostics: Vec<String>,
}

impl RepositorySemantics {
    pub fn module(&self, id: &ModuleId) -> Option<&ModuleDescriptor> {
        self.modules.iter().find(|m| &m.id == id)
    }

    /// Every module id, plus the unassigned pseudo-module when it has files.
    pub fn module_universe(&self) -> BTreeSet<ModuleId> {
        let mut ids: BTreeSet<ModuleId> = self.modules.iter().map(|m| m.id.clone()).collect();
        if !self.unassigned.is_empty() {
            ids.insert(ModuleId::unassigned());
        }
        ids
    }

    /// Files of a module id, including the unassigned pseudo-module.
    pub fn files_of(&self, id: &ModuleId) -> Vec<String> {
        if *id == ModuleId::unassigned() {
            return self.unassigned.clone();
        }
        self.module(id)
            .map(|m| m.files.iter().cloned().collect())
            .unwrap_or_default()
    }

    /// Modules (or the unassigned pseudo-module) containing `file`.
    pub fn modules_of_file(&self, file: &str) -> Vec<ModuleId> {
        let mut out: Vec<ModuleId> = self
            .modules
            .iter()
            .filter(|m| m.files.contains(file))
            .map(|m| m.id.clone())
            .collect();
        if out.is_empty() && self.unassigned.iter().any(|f| f == file) {
            out.push(ModuleId::unassigned());
        }
        out
    }

    pub fn roles(&self) -> BTreeSet<Role> {
        self.modules.iter().map(|m| m.role.clone()).collect()
    }
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error(transparent)]
    CodeFacts(#[from] CodeFactsError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Full profiling pass over one checkout.
pub fn profile_repository(
    checkout: &RepoCheckout,
    taxonomy: &RoleTaxonomy,
    gateway: &Gateway,
) -> Result<RepositorySemantics, ProfileError> {
    let (index, mut diagnostics) = CodeIndex::build(checkout)?;
    let assignment = assign_modules(checkout, &index, taxonomy, gateway)?;
    diagnostics.extend(assignment.diagnostics.iter().cloned());
    let relations = index.call_relations();
    let graph = build_module_graph(&assignment.modules, &relations);
    let (summary, summary_usage) = summarize_repository(checkout, &assignment.modules, &index, gateway)?;
    if summary.degraded {
        diagnostics.push("repository summary degraded to module-label fallback".into());
    }
    let mut token_usage = assignment.usage;
    token_usage.add(summary_usage);
    Ok(RepositorySemantics {
        checkout: checkout.clone(),
        summary,
        modules: assignment.modules,
        unassigned: assignment.unassigned,
        assignments: assignment.files,
        graph,
        token_usage,
        diagnostics,
    })
}

const SEMANTICS_KIND: &str = "repository-semantics";

pub fn semantics_path(store_dir: &Path, project: &str, commit: &str) -> PathBuf {
    store_dir.join(format!("{}.json", store::revision_key(project, commit)))
}

pub fn persist_semantics(sem: &RepositorySemantics, store_dir: &Path) -> Result<PathBuf, StoreError> {
    let path = semantics_path(store_dir, &sem.checkout.project_name, &sem.checkout.commit_id);
    store::write_document(&path, SEMANTICS_KIND, sem)?;
    Ok(path)
}

pub fn load_semantics(store_dir: &Path, project: &str, commit: &str) -> Result<RepositorySemantics, StoreError> {
    store::read_document(&semantics_path(store_dir, project, commit), SEMANTICS_KIND)
}

/// Every profile in a store directory, sorted by (project, commit).
pub fn load_all_semantics(store_dir: &Path) -> Result<Vec<RepositorySemantics>, StoreError> {
    let mut out = Vec::new();
    let entries = match std::fs::read_dir(store_dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => {
            return Err(StoreError::Io {
                path: store_dir.display().to_string(),
                source: e,
            })
        }
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for p in paths {
        out.push(store::read_document(&p, SEMANTICS_KIND)?);
    }
    out.sort_by(|a: &RepositorySemantics, b| {
        (&a.checkout.project_name, &a.checkout.commit_id).cmp(&(&b.checkout.project_name, &b.checkout.commit_id))
    });
    Ok(out)
}
