//! Functional and timing model of an attention-based HGNN accelerator that
//! prunes neighbors at runtime with per-target min-heaps and schedules work
//! per edge instead of per stage.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the experiment
//! driver and the command line live in the `ade-sim` crate.
//!
//! Module map:
//! - [`hetgraph`]: typed graphs and semantic-graph construction (CSC).
//! - [`model`]: projection, attention coefficients, softmax, aggregation,
//!   semantic fusion and the unpruned reference forward pass.
//! - [`pruner`]: retention domains and streaming top-K selection.
//! - [`execflow`]: staged and operation-fused schedulers plus the trace
//!   interpreter.
//! - [`simcore`]: event-level timing, memory and energy model.
//! - [`metrics`]: disparity, compute reduction, fidelity and run reports.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
pub mod execflow;
pub mod hetgraph;
pub mod metrics;
pub mod model;
pub mod pruner;
pub mod simcore;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;
