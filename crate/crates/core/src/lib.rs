//! Zero-shot query runtime estimation.
//!
//! Query plans are encoded as graphs of typed nodes (plan operators, tables,
//! attributes, predicates, output columns) carrying only features whose
//! meaning is the same on every database. A message-passing network trained
//! on traces from many databases then predicts runtimes on databases it has
//! never seen.

pub mod baseline;
pub mod cli;
pub mod error;
pub mod featurize;
pub mod generalization;
pub mod metrics;
pub mod model;
pub mod neural;
pub mod synth;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
