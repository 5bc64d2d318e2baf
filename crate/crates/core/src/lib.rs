//! Multi-image grounding toolkit: evaluation protocol and metrics, chain-of-thought
//! inference orchestration, training-data construction, checkpoint merging and
//! high-resolution slicing.

pub mod benchdata;
pub mod client;
pub mod dataforge;
pub mod geometry;
pub mod hislicer;
pub mod journal;
pub mod mergekit;
#[cfg(feature = "mock-server")]
pub mod mock;
pub mod orchestrator;
pub mod outparse;
pub mod prompts;
pub mod scoring;

pub use geometry::{BBox, CoordSpace, Region, Scalar};

pub type BBoxF32 = geometry::BBox<f32>;
pub type BBoxF64 = geometry::BBox<f64>;
/// Boxes over exact rationals, used for oracle comparisons.
pub type ExactBBox = geometry::BBox<num_rational::Ratio<i64>>;

pub type EmbeddingIndexF32 = dataforge::EmbeddingIndex<f32>;
pub type EmbeddingIndexF64 = dataforge::EmbeddingIndex<f64>;
