//! Spatiotemporal-aware click-through rate prediction: a small autodiff engine, the
//! embedding, gating, semantic-transformation and adaptive-bias-tower modules,
//! ranking metrics, a synthetic data generator and the training harness.

pub mod error;
pub mod features;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod params;
pub mod stabt;
pub mod stael;
pub mod synthgen;
pub mod ststl;

pub use error::{Error, Result};
pub use features::{Impression, Schema, Vocabulary};
pub use model::{BasmModel, ModelConfig, Variant};
pub use numcore::{Graph, NodeId, Tensor};
