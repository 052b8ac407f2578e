//! Composite layers for deep learning on 3D point clouds.
//!
//! A composite layer splits point convolution into a spatial function (a
//! radial basis function network over relative offsets) and a semantic
//! function combining its output with the input features. This crate
//! provides the convolutional and aggregate composite layers, a reference
//! weight-tensor point convolution, the CompositeNet architectures built from
//! them, training with manual gradients, self-supervised and Deep SVDD anomaly
//! detection, a GOOD + Isolation Forest baseline, and evaluation metrics.

pub mod anomaly;
pub mod baselines;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod layers;
pub mod network;
pub mod real;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{PointCloud, WindowSet};
pub use real::{Precision, Real};
