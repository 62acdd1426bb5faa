//! Quantum Fisher information of light emitted by few-level Markovian sources.

pub mod error;
pub mod linalg;
pub mod model;

pub use error::{Error, Result};
pub mod dynamics;
pub mod correlators;
pub mod qfi;
pub mod oracle;
pub mod mps;
pub mod adjoint;
pub mod optimizer;
pub mod measurement;
