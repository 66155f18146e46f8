use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::priority::{Priority, PriorityPartition};
use super::InspectionError;
use crate::repo_semantics::{ModuleId, RepositorySemantics};
use crate::store::{self, StoreError};
use crate::vuln_semantics::{ChainRole, VulnerabilitySemantics};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum FileStatus {
    Pending,
    InProgress,
    Completed { reason: String, iteration: u32 },
}

impl FileStatus {
    pub fn is_completed(&self) -> bool {
        matches!(self, FileStatus::Completed { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateLocation {
    pub file: String,
    pub start_line: usize,
    pub end_line: usize,
    pub function: Option<String>,
}

impl CandidateLocation {
    pub fn overlaps(&self, other: &CandidateLocation) -> bool {
        self.file == other.file && self.start_line <= other.end_line && other.start_line <= self.end_line
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NarrativeStep {
    pub role: ChainRole,
    pub file: String,
    pub function: String,
    #[serde(default)]
    pub line: Option<usize>,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub location: CandidateLocation,
    /// Source-first, sink-last path description.
    pub path_narrative: Vec<NarrativeStep>,
    /// The sensitive API reached at the sink, e.g. `torch.load`.
    pub sink: String,
    pub static_evidence: Vec<String>,
    pub confidence: Confidence,
    pub reference_advisory: String,
    pub reported_iteration: u32,
}

impl Candidate {
    pub fn is_duplicate_of(&self, other: &Candidate) -> bool {
        self.sink == other.sink && self.location.overlaps(&other.location)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeBoundary {
    /// Files whose completion allows the loop to stop early.
    pub critical_files: BTreeSet<String>,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnEnd {
    NoToolCalls,
    Finished,
    TurnBudget,
    ContextBudget,
    BackendError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub tool_calls: usize,
    pub files_completed: Vec<String>,
    pub candidates_reported: Vec<String>,
    pub ended_by: TurnEnd,
    pub compactions: usize,
    pub diagnostics: Vec<String>,
}

/// A data-flow observation worth sharing with later runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowNote {
    pub module: ModuleId,
    pub file: String,
    pub function: String,
    pub summary: String,
}

/// The externalized audit state Z for one (advisory, target revision).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectionMemory {
    pub advisory_id: String,
    pub project: String,
    pub commit: String,
    pub file_status: BTreeMap<String, FileStatus>,
    /// Inspection order: P1 files, then P2, then P3.
    pub file_order: Vec<String>,
    pub module_of: BTreeMap<String, Vec<ModuleId>>,
    pub priorities: PriorityPartition,
    pub candidates: Vec<Candidate>,
    pub scope_boundary: ScopeBoundary,
    pub iteration_count: u32,
    pub max_iterations: u32,
    pub rejected_hypotheses: Vec<String>,
    pub iterations: Vec<IterationRecord>,
    pub flow_notes: Vec<FlowNote>,
}

impl InspectionMemory {
    pub fn priority_of_file(&self, file: &str) -> Option<Priority> {
        self.module_of
            .get(file)?
            .iter()
            .filter_map(|m| self.priorities.priority_of(m))
            .min()
    }

    pub fn completed_files(&self) -> BTreeSet<String> {
        self.file_status
            .iter()
            .filter(|(_, s)| s.is_completed())
            .map(|(f, _)| f.clone())
            .collect()
    }

    pub fn remaining_in_order(&self) -> Vec<&str> {
        self.file_order
            .iter()
            .filter(|f| !self.file_status.get(*f).is_some_and(FileStatus::is_completed))
            .map(String::as_str)
            .collect()
    }

    pub fn remaining_critical(&self) -> Vec<&str> {
        self.remaining_in_order()
            .into_iter()
            .filter(|f| self.scope_boundary.critical_files.contains(*f))
            .collect()
    }

    /// Early stop: every critical-scope file completed.
    pub fn stop_policy_satisfied(&self) -> bool {
        self.remaining_critical().is_empty()
    }

    /// Transitions a file to completed; completed files never move back.
    pub fn mark_completed(&mut self, file: &str, reason: &str) -> Result<bool, String> {
        let status = self
            .file_status
            .get_mut(file)
            .ok_or_else(|| format!("{file} is not in the inspection scope"))?;
        if status.is_completed() {
            return Ok(false);
        }
        *status = FileStatus::Completed {
            reason: reason.to_string(),
            iteration: self.iteration_count,
        };
        Ok(true)
    }

    pub fn mark_in_progress(&mut self, file: &str) {
        if let Some(s) = self.file_status.get_mut(file) {
            if *s == FileStatus::Pending {
                *s = FileStatus::InProgress;
            }
        }
    }

    /// Adds a candidate, merging with an existing one at an overlapping span
    /// with the same sink. Returns the id the report was filed under.
    pub fn add_candidate(&mut self, mut candidate: Candidate) -> (String, bool) {
        if let Some(existing) = self.candidates.iter_mut().find(|c| c.is_duplicate_of(&candidate)) {
            existing.confidence = existing.confidence.max(candidate.confidence);
            for e in candidate.static_evidence {
                if !existing.static_evidence.contains(&e) {
                    existing.static_evidence.push(e);
                }
            }
            existing.location.start_line = existing.location.start_line.min(candidate.location.start_line);
            existing.location.end_line = existing.location.end_line.max(candidate.location.end_line);
            return (existing.id.clone(), true);
        }
        candidate.id = format!("C{}", self.candidates.len() + 1);
        let id = candidate.id.clone();
        self.candidates.push(candidate);
        (id, false)
    }

    /// Stable digest of the serialized state.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("memory serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn progress_line(&self) -> String {
        let total = self.file_status.len();
        let done = self.file_status.values().filter(|s| s.is_completed()).count();
        format!(
            "{done}/{total} files completed; {} critical-scope files remaining; {} candidates; iteration {}/{}",
            self.remaining_critical().len(),
            self.candidates.len(),
            self.iteration_count,
            self.max_iterations
        )
    }
}

/// Builds Z with files ordered by tier; a file in several modules takes its
/// best tier. The critical scope is P1 ∪ P2, or every file when both are empty.
pub fn init_memory(
    target: &RepositorySemantics,
    vuln: &VulnerabilitySemantics,
    priorities: PriorityPartition,
    max_iterations: u32,
) -> InspectionMemory {
    let mut module_of: BTreeMap<String, Vec<ModuleId>> = BTreeMap::new();
    for id in target.module_universe() {
        for f in target.files_of(&id) {
            module_of.entry(f).or_default().push(id.clone());
        }
    }
    let mut file_order = Vec::new();
    let mut seen = BTreeSet::new();
    let mut critical = BTreeSet::new();
    for (tier, ids) in priorities.tiers() {
        for id in ids {
            for f in target.files_of(id) {
                if seen.insert(f.clone()) {
                    if tier != Priority::P3 {
                        critical.insert(f.clone());
                    }
                    file_order.push(f);
                }
            }
        }
    }
    let description = if critical.is_empty() {
        critical = file_order.iter().cloned().collect();
        "no P1/P2 modules; critical scope is every file; stop when all are completed or the iteration cap is reached".to_string()
    } else {
        "critical scope is P1 ∪ P2; stop early once all of it is completed, P3 is best effort within the iteration cap".to_string()
    };
    InspectionMemory {
        advisory_id: vuln.advisory_id.clone(),
        project: target.checkout.project_name.clone(),
        commit: target.checkout.commit_id.clone(),
        file_status: file_order.iter().map(|f| (f.clone(), FileStatus::Pending)).collect(),
        file_order,
        module_of,
        priorities,
        candidates: Vec::new(),
        scope_boundary: ScopeBoundary {
            critical_files: critical,
            description,
        },
        iteration_count: 0,
        max_iterations,
        rejected_hypotheses: Vec::new(),
        iterations: Vec::new(),
        flow_notes: Vec::new(),
    }
}

const MEMORY_KIND: &str = "inspection-memory";

pub fn memory_path(state_dir: &Path, advisory_id: &str, project: &str, commit: &str) -> PathBuf {
    state_dir
        .join(store::sanitize_key(advisory_id))
        .join(format!("{}.json", store::revision_key(project, commit)))
}

pub fn save_memory(path: &Path, memory: &InspectionMemory) -> Result<(), StoreError> {
    store::write_document(path, MEMORY_KIND, memory)
}

pub fn load_memory(path: &Path) -> Result<InspectionMemory, StoreError> {
    store::read_document(path, MEMORY_KIND)
}

/// Persists a freshly initialized memory; refuses to overwrite unless `fresh`.
pub fn create_memory(path: &Path, memory: &InspectionMemory, fresh: bool) -> Result<(), InspectionError> {
    if path.exists() && !fresh {
        return Err(InspectionError::MemoryExists(path.display().to_string()));
    }
    save_memory(path, memory)?;
    Ok(())
}
