//! Speaker-verification toolkit: log-mel features, temporal pooling,
//! sub-center margin losses, a two-stage desk-scale trainer, a genre-aware
//! scoring backend and detection/retrieval metrics.

pub mod backend;
pub mod dataio;
pub mod error;
pub mod feats;
pub mod losses;
pub mod metrics;
pub mod pooling;
pub mod trainer;

pub use error::{Error, Result};
