//! Pure-Rust building blocks for single-stage registration and fusion of
//! unaligned multimodal medical image pairs.
//!
//! Everything here is independent of the neural network backend so it can run
//! in the browser demo and serve as the reference path for the autodiff
//! kernels in `bsfa-net`.

pub mod data;
pub mod deformation;
pub mod error;
pub mod imaging;
pub mod io;
pub mod metrics;

pub use deformation::{DeformationField, SyntheticDeformationSpec};
pub use error::{Error, Result};
pub use imaging::{FeatureMap, Image, Scale};
pub use metrics::{MetricParams, MetricScores};
