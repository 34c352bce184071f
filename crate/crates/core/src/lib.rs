//! Parameter-efficient video-text retrieval on a frozen two-tower transformer.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: f64 tensors, parameter store, reverse-mode tape, gradient checker.
//! - [`backbone`]: the frozen visual and text towers with per-layer hook points.
//! - [`lorm`]: low-rank temporal scale/shift modulation and its decomposition variants.
//! - [`asa`]: text-conditioned patch selection and offset-warped key/value attention.
//! - [`retrieval`]: embeddings, similarity, contrastive loss, ranking metrics, dual softmax.
//! - [`harness`]: configuration, synthetic data, training, checkpoints, ablations, diagnostics.
//!
//! Interchangeable algorithm variants (modulators, patch selectors, ablation
//! suites) live behind traits and are looked up by name through [`registry`].

pub mod asa;
pub mod backbone;
pub mod error;
pub mod harness;
pub mod lorm;
pub mod registry;
pub mod retrieval;
pub mod tensor;

pub use error::{Error, Result};
