//! Single-stage referring-expression grounding.
//!
//! Given an image-like scene and a short phrase ("the red circle on the
//! left"), the model predicts the referent's bounding box directly, without
//! region proposals: a convolutional backbone yields a grid of local visual
//! features, a bidirectional recurrent encoder embeds the phrase, soft
//! attention over the grid produces a joint representation, and a small head
//! regresses the box plus a confidence score. Training combines four weighted
//! losses (box regression, confidence, guided attention, attribute
//! prediction); evaluation is IoU@0.5 accuracy and per-referent latency.

pub mod config;
pub mod data;
pub mod evaluation;
pub mod geometry;
pub mod grounder;
pub mod interactor;
pub mod nn;
pub mod rng;
pub mod text;
pub mod training;
pub mod vision;

mod error;

pub use error::{Error, Result};
