//! Explaining and interpreting small feed-forward ReLU networks.
//!
//! The crate is organised around a minimal `f64` network engine
//! ([`network`], [`layers`], [`train`]) and the analyses built on top of it:
//!
//! - [`explain`]: relevance propagation (αβ, ε, z⁺, z^B, w² and pooling
//!   rules) plus sensitivity analysis and simple Taylor decomposition;
//! - [`prototype`]: activation maximization with ℓ2, mean-anchored,
//!   localization and Gaussian-RBM expert regularizers;
//! - [`eval`]: pixel-flipping curves with AUC, and explanation continuity;
//! - [`heatmaptools`]: relevance pooling, translation averaging, sliding
//!   windows, pattern masking and PPM rendering;
//! - [`io`]: model JSON, IDX datasets and CSV/PPM output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod explain;
pub mod fixtures;
pub mod heatmaptools;
pub mod io;
pub mod layers;
pub mod network;
pub mod prototype;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use explain::{Explainer, Heatmap, Method, MethodTag, RuleConfig};
pub use layers::{Layer, LayerKind, PoolSpec};
pub use network::{log_softmax, softmax, ActivationTrace, Network};
pub use tensor::Tensor;
