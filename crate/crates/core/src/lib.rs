//! Contrastive predictive coding for image anomaly detection and segmentation.
//!
//! Sub-patch embeddings are trained with an InfoNCE objective to predict
//! their neighbours in four directions. At test time the same loss, with
//! negatives drawn from defect-free training data, scores every sub-patch;
//! the top scores give an image-level anomaly score and overlapping sub-patch
//! scores are averaged into a pixel heatmap.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod scoring;
pub mod seed;
pub mod trainer;

pub use error::{CpcError, Result};
