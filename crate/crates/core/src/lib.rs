//! Neuron-guided mixture-of-experts extension of small transformers.
//!
//! The pipeline runs in five steps:
//!
//! 1. [`trace`] records sample-level activations of a dense model over a
//!    multilingual [`corpus`].
//! 2. [`profile`] scores every neuron's language specificity with average
//!    precision and selects language-specific neurons.
//! 3. [`alloc`] turns the per-layer union of those neurons into an expert
//!    count per layer.
//! 4. [`model`] upcycles the dense model into a mixture of experts with that
//!    allocation, and [`train`] runs expert initialization followed by
//!    router training on a replay mix.
//! 5. [`analysis`] measures how language-specific each expert became.
//!
//! [`experiment`] chains all of it on a synthetic two-language task.

pub mod alloc;
pub mod analysis;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod model;
pub mod profile;
pub mod tensor;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
