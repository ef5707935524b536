//! Runtime and data forge for tool-augmented interleaved vision-language
//! reasoning.
//!
//! The crate covers the full loop around a multimodal chat model that thinks
//! with images: parsing and emitting the tag-delimited reasoning-trace
//! grammar, executing the three visual tools (`focus_area`, `zoom_in`,
//! `reuse`) with train/infer semantics under a pixel budget, driving the
//! multi-turn inference loop against pluggable backends, synthesizing
//! verified reasoning-chain datasets, and exporting single-turn training
//! sequences with modality masks and normalized coordinates.

pub mod chain;
pub mod cli;
pub mod dialogue;
pub mod driver;
pub mod exporter;
pub mod gateway;
pub mod geometry;
pub mod image_store;
pub mod pipeline;
pub mod scalar;
pub mod templates;
pub mod toolbox;
pub mod trace;

/// Default scalar for normalized coordinate math.
pub type Scalar = f64;

/// Normalized bounding box over the crate-default scalar.
pub type BBox = geometry::BBox<Scalar>;

pub use chain::{ReasoningChain, ReasoningContent, ReasoningStep, ToolCommand, ToolName};
pub use image_store::{ContentRef, ImageId, ImageState, ImageStore, Provenance};
pub use toolbox::{PixelBudget, ToolMode};
