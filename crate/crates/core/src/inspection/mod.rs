//! Memory-guided inspection of one target revision.

mod engine;
mod memory;
mod priority;
mod shared;
mod tools;

use thiserror::Error;

use crate::code_facts::CodeFactsError;
use crate::store::StoreError;

pub use engine::{
    build_task_message, candidate_files, compact_context, distill_shared_memory, inspect_target, Compaction,
    ExistingMemory, InspectionConfig, InspectionOutcome, DISTILL_PROMPT_ID, INSPECTION_PROMPT_ID,
};
pub use memory::{
    create_memory, init_memory, load_memory, memory_path, save_memory, Candidate, CandidateLocation, Confidence,
    FileStatus, FlowNote, InspectionMemory, IterationRecord, NarrativeStep, ScopeBoundary, TurnEnd,
};
pub use priority::{partition, prioritize, prioritize_with, Priority, PriorityPartition, PromotionReason};
pub use shared::{SharedEntry, SharedMemory, MAX_OBSERVATION_CHARS};
pub use tools::{dispatch, inspection_tools, InspectionEnv, ToolEffect, ToolResult, MAX_READ_LINES, MAX_SEARCH_HITS};

#[derive(Debug, Error)]
pub enum InspectionError {
    #[error("inspection memory already exists at {0}; resume it or start fresh")]
    MemoryExists(String),
    #[error("inspection memory at {0} belongs to a different advisory or revision")]
    MemoryMismatch(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    CodeFacts(#[from] CodeFactsError),
}
