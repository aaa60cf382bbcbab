//! Compress-add-smooth memory for streams of Gaussian-mixture targets.

pub mod curricula;
pub mod dynamics;
pub mod error;
pub mod gm;
pub mod harness;
pub mod metrics;
pub mod protocol;

pub use error::{CasError, Result, Violation};
pub use gm::GaussianMixture;
pub use protocol::{MemoryState, ProtocolGrid};
