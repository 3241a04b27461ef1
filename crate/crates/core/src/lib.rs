//! Streaming multimodal gating engine.
//!
//! Packs per-second audio/video feature streams into aligned multimodal
//! units, encodes them incrementally with time-aligned 3D rotary positions
//! through a small causal transformer, trains a gate head to decide *when*
//! to respond, and evaluates both timing and content with unified
//! proactive/reactive protocols on synthetic streams with known ground
//! truth.
//!
//! The numeric core is generic over the scalar type (`f32` / `f64`) via
//! [`Scalar`]; concrete aliases for the common instantiations live at the
//! crate root.

pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gate_head;
pub mod graph;
pub mod kv_cache;
pub mod rope;
pub mod scalar;
pub mod stream_sim;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod trigger_engine;
pub mod unit_builder;
pub mod vocab;

pub use error::CoreError;
pub use scalar::Scalar;

/// Model parameters in single precision, the default for training runs.
pub type ModelParams32 = backbone::ModelParams<f32>;
/// Model parameters in double precision, used by equivalence and gradient
/// checks.
pub type ModelParams64 = backbone::ModelParams<f64>;
/// Single-precision matrix.
pub type Mat32 = tensor::Mat<f32>;
/// Double-precision matrix.
pub type Mat64 = tensor::Mat<f64>;
/// Streaming session cache, single precision.
pub type KvCache32 = kv_cache::KvCache<f32>;
/// Streaming session cache, double precision.
pub type KvCache64 = kv_cache::KvCache<f64>;
