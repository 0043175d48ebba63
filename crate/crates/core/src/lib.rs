pub mod error;
pub mod hnsw;
pub mod kv;
pub mod memory;
pub mod model;
pub mod orchestrator;
pub mod radix;
pub mod reward;
pub mod splice;

pub use error::{Error, Result};
