//! FairSAD: fair graph representation learning via sensitive-attribute
//! disentanglement.
//!
//! A self-contained library plus experiment CLI: multi-channel disentangled
//! graph convolution with a learnable channel mask, a four-part training
//! objective (classification, distance correlation between channels, a
//! channel discriminator, and a mask covariance penalty), and group-fairness
//! evaluation.

pub mod adam;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod report;
pub mod sampling;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::FairsadError;
