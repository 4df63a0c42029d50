//! Next-location prediction that first predicts how long until and how far the
//! next move will be, then feeds those predicted contexts to the location head.

pub mod checkpoint;
pub mod diffcore;
pub mod encoder;
pub mod entropy;
pub mod error;
pub mod geospace;
pub mod heads;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod modelcheck;
pub mod relay;
pub mod rng;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
