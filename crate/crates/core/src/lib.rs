#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod extremes;
pub mod ingest;
pub mod npestim;
mod nullable;
pub mod optim;
pub mod pestim;
pub mod pipeline;
pub mod sim;
pub mod spline;
pub mod stats;
pub mod synth;
pub mod trend;
pub mod validate;

pub use error::{Error, Result};
