//! CNN-based spatiotemporal attention for video summarization.
//!
//! Frame features are stacked into a three-channel "image", a small 2D CNN
//! turns them into a per-frame, per-dimension attention map, and a classifier
//! scores every frame. Around the model sit shot segmentation, knapsack
//! summary selection, rank-correlation evaluation, a training loop and a
//! multiply-accumulate counter.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN too

pub mod backbone;
pub mod dataio;
pub mod error;
pub mod macs;
pub mod metrics;
pub mod model;
pub mod params;
pub mod shots;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
