//! The interactive loop: SYNC handling with incremental prefill,
//! memory-augmented candidate generation, and preemptible background
//! curation.

pub mod curator;
pub mod engine;
pub mod session;
pub mod worker;

use serde::{Deserialize, Serialize};

pub use curator::{
    declarative_text, extraction_fields, CancelTicket, CurationDecision, CurationPolicy, CurationReport, Curator,
    MemorySnapshot, Preemption, RulePolicy, SampledPolicy, TraceOutcome,
};
pub use engine::{AcceptAck, Backend, CurationStatus, Engine, EngineConfig, EngineCounters, EngineMetrics, SyncAck};
pub use session::{InteractionTrace, Message, Role, SessionState, SyncRequest};
pub use worker::{MemoryWorker, WorkerStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Direct,
    MemoryGrounded { record_id: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub text: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateTiming {
    pub ttfc_ms: f64,
    /// Model token computations for this request, sampling included.
    pub forward_tokens: u64,
    pub forward_calls: u64,
    /// Context tokens computed by the incremental prefill.
    pub prefill_computed: usize,
    /// Context tokens reused from the prefix cache.
    pub matched_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalInfo {
    pub query: String,
    pub record_id: Option<u64>,
    pub score: Option<f32>,
    pub fallback: bool,
    /// The memory block came from a compiled L1 blob.
    pub blob: bool,
}

/// Candidates for one composing state; the first is the GhostText.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub typed: String,
    pub candidates: Vec<RankedCandidate>,
    pub retrieval: Option<RetrievalInfo>,
    pub timing: CandidateTiming,
}
