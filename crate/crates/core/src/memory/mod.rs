//! Tiered memory: compiled KV blobs (L1), an auditable fact store with a
//! vector index (L2), and an append-only trajectory log (L3).

pub mod blob;
pub mod embed;
pub mod facts;
pub mod trajectory;

pub use blob::{compile_l1_blob, inject_l1_blob, L1Blob};
pub use embed::{Embedder, TrigramEmbedder};
pub use facts::{FactStore, MemoryRecord};
pub use trajectory::{TrajectoryEntry, TrajectoryLog};
