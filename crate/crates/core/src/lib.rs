//! Joint parameter selection for domain-generalizing fine-tuning.
//!
//! Sparse update masks are chosen from per-domain gradients of a frozen
//! pre-trained model: a per-domain top-k importance filter intersected across
//! domains, then a cross-domain gradient-variance filter. Only the masked
//! coordinates (plus the classifier head) are fine-tuned.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod rng;
pub mod selection;
pub mod tensor;
pub mod trainer;

pub use error::{ErrorClass, JpsError, Result};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
