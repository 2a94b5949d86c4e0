//! Self-evolving multi-agent code generation.
//!
//! A coding team (a DAG of LLM agents) writes code, a testing team writes
//! unit tests, a sandbox runs both, and a gradient agent plus an updating
//! agent rewrite the coding team from the test feedback. The loop repeats
//! until the tests pass or the iteration budget runs out.

pub mod agent;
pub mod backprop;
pub mod environment;
pub mod evolution;
pub mod forward;
pub mod graph;
pub mod metrics;
pub mod provider;
pub mod runtime;
pub mod workspace;
