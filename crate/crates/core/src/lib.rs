//! Building blocks for prompt-based zero-shot voice conversion on
//! self-supervised speech features.
//!
//! The pipeline: a two-stage residual K-Means [`decoupler`] turns SSL
//! features into an enhanced content representation; a kNN [`teacher`]
//! renders source utterances in another speaker's timbre; the [`sampler`]
//! mixes reconstruction and conversion pairs with a speaker prompt in front;
//! [`losses`] scores a prediction with MSE, SSIM and a progressive
//! multi-codebook cross-entropy; and a small [`converter`] trains on it all.

pub mod converter;
pub mod decoupler;
pub mod demo;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod format;
pub mod gradcheck;
pub mod kmeans;
pub mod losses;
pub mod mat;
pub mod sampler;
pub mod teacher;

pub use error::{Error, Result};
pub use features::FeatureMatrix;
