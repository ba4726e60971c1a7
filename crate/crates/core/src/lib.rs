//! Facial-expression analysis pipeline built on a small reverse-mode autodiff core.
//!
//! Layers, from the bottom up:
//!
//! - [`tensor`]: dense tensors, the differentiation tape, binary checkpoints.
//! - [`nn`]: parameter storage, layers, the residual block, ResNet-18 topology.
//! - [`arm`]: the pooling substitute (feature arrangement, de-albino weighting,
//!   affinity sharing) placed before the classifier.
//! - [`loss`]: cross-entropy and focal loss over softmax probabilities.
//! - [`gan`]: AU-conditioned expression-transfer generator/discriminator,
//!   corpus synthesis and the real-vs-generated effectiveness protocol.
//! - [`corpus`]: manifests, majority-vote annotation, split protocols.
//! - [`train`]: Adam, the training loop, metrics and report tables.

pub mod arm;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gan;
pub mod gradcheck;
pub mod imageio;
pub mod loss;
pub mod nn;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
