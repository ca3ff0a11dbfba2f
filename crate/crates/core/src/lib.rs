//! A self-training generative fuzzer.
//!
//! A neural generator turns latent vectors into program inputs, the inputs run
//! against instrumented parsers, a variational autoencoder embeds the resulting
//! coverage traces, and farthest-first traversal over the embeddings keeps the
//! training corpus diverse.

pub mod analysis;
pub mod config;
pub mod error;
pub mod generator;
pub mod nn;
pub mod orchestrator;
pub mod persist;
pub mod ranking;
pub mod targets;
pub mod trace;
pub mod vae;

pub use error::{Error, Result};
pub use targets::{execute_target, ExecutionRecord, Harness, Outcome, TargetProgram};
pub use trace::{bucketize, edge_index, CoverageTrace, Tracer};
