//! Fully-attentive vision-and-language navigation at desk scale.
//!
//! The crate bundles everything needed to train and evaluate a low-level
//! instruction-following agent on synthetic graph worlds: a reverse-mode
//! autodiff tensor core, the attention building blocks, the navigation
//! simulator with teacher oracles, the agent network with both a low-level
//! (atomic actions) and a high-level (viewpoint selection) head, imitation
//! and policy-gradient training loops, and the usual trajectory metrics
//! (NE / SR / OSR / SPL / CLS / DTW / nDTW / SDTW).

pub mod attention;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod corpus;
pub mod env;
pub mod metrics;
pub mod model;
pub mod r2r;
pub mod train;
pub mod tensor;
pub mod vocab;

pub use tensor::{Axis, Gradients, Graph, ParamGrads, ParamId, ParamStore, Tensor, TensorError};
