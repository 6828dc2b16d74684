//! Host-side companion of `ade-core`: graph, parameter and trace files, run
//! configuration, the experiment driver and report output.

pub mod bench;
pub mod config;
pub mod error;
pub mod experiment;
pub mod graph_io;
pub mod inspect;
pub mod params_io;
pub mod trace_io;

pub use error::{CliError, Result};
