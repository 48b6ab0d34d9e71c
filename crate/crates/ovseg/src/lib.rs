//! Open-vocabulary semantic segmentation at desk scale.
//!
//! The pipeline labels every pixel of an image against a runtime-supplied
//! category vocabulary: a frozen stub encoder produces visual features and
//! prompt embeddings, a prior-guided regional alignment stage turns them into
//! a per-pixel guidance tensor, a local/global cross-modal fusion stack mixes
//! guidance with mid-level features, and a guidance-modulated decoder emits
//! per-category logit maps. Everything runs on a small deterministic tensor
//! engine with reverse-mode autodiff, so each stage is testable against
//! brute-force oracles and finite-difference gradient checks.

pub mod align;
pub mod decoder;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod lgse;
pub mod model;
pub mod parallel;
pub mod pixmap;
pub mod rng;
pub mod scene;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};
