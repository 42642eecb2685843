//! Span-supervised reading model, its sentence-classification variant, and the
//! tooling around transferring one into the other.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense f64 tensors and a single-use reverse-mode tape.
//! - [`model`]: the attention encoder plus the span and max-pool answer heads.
//! - [`datasets`]: canonical examples, loaders, span→sentence conversion,
//!   vocabulary building and a synthetic corpus generator.
//! - [`training`]: losses, AdaDelta, weight EMA and the early-stopping loop.
//! - [`transfer`]: checkpoint I/O, head surgery and ensembling.
//! - [`evaluation`]: ranking metrics, accuracy and significance tests.
//! - [`analysis`]: attention maps, sparsity and CSV export.

pub mod analysis;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
