//! Service, evaluation and benchmark harness around `ghostline-core`.

pub mod bench;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod eval;
pub mod protocol;
pub mod runtime;
pub mod score;
pub mod server;
