//! Domain-invariant adversarial training at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine with a gradient
//! reversal node, a three-headed classifier (feature extractor, label head,
//! domain head), PGD-family attacks, the robust loss family, an SGD trainer
//! and an evaluation harness.

pub mod attack;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod report;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{ArchSpec, Classifier, Layer, ModelParams, Partition};
pub use tensor::{Scalar, Tensor};
