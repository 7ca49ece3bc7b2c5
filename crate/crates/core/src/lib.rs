//! Zero/few-shot recognition of shapes represented by multiple view
//! features.
//!
//! - [`aggregate`]: prompt-guided view weighting and zero-shot logits.
//! - [`encoder`]: CLS-token transformer aggregator for the few-shot path.
//! - [`train`]: K-shot sampling, classification and distillation losses,
//!   Adam, evaluation.
//! - [`synth`]: seeded synthetic feature generator.
//! - [`store`]: binary feature containers and JSON manifests.
//! - [`tensor`], [`tape`], [`gradcheck`]: the numeric substrate.
//! - [`verify`]: the finite-difference suite over ops and the encoder.

// `!(x > 0.0)` style checks are there to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod store;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
