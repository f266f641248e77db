//! Trainable joint registration and fusion network.
//!
//! A shared encoder turns each image into full-resolution features and a
//! token grid with a modality head; heads are cross-injected and passed
//! through per-modality transfer blocks; a bidirectional pyramid of
//! registration layers predicts the aligning field; a multi-scale fusion
//! stack produces the fused image. Everything runs on candle tensors with
//! reverse-mode autodiff, in `f32` for training and `f64` for gradient
//! checks.

pub mod bsfa;
pub mod checkpoint;
pub mod config;
pub mod convert;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod mdffr;
pub mod mmff;
pub mod model;
pub mod ops;
pub mod params;
pub mod training;

pub use config::{Ablation, BsfaMode, ModelConfig};
pub use error::{NetError, Result};
pub use model::{Forward, LossParts, LossValues, Model};
pub use params::ParamStore;
