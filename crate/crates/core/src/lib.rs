//! Desk-scale cascaded segmentation pipeline for multi-modal brain MRI.
//!
//! The crate covers the full path from bytes to metrics: NIfTI-1 reading and
//! writing, geometry/morphology primitives over 3D volumes, Gaussian-peak
//! intensity normalization, a small residual-encoder 3D U-Net with exact
//! reverse-mode gradients, SGD training with k-fold cross-validation and
//! ensembling, the two-stage coarse-to-fine cascade with modality routing,
//! a synthetic phantom cohort generator, and Dice / lesion-wise Dice / HD95
//! evaluation with the challenge's empty-mask conventions.
//!
//! Numeric kernels (tensors, the network, the optimizer, histogram fitting)
//! are generic over the scalar type through [`scalar::Real`]; training runs
//! in `f32`, finite-difference gradient checks in `f64`. Concrete aliases
//! live at the crate root.

pub mod cascade;
pub mod checkpoint;
pub mod components;
pub mod distance;
pub mod error;
pub mod eval;
pub mod labels;
pub mod morphology;
pub mod nifti;
pub mod normalize;
pub mod optim;
pub mod phantom;
pub mod resample;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Real;

/// Tensors at training precision.
pub type Tensor32 = tensor::Tensor<f32>;
/// Tensors at gradient-check precision.
pub type Tensor64 = tensor::Tensor<f64>;
/// Network at training precision.
pub type Network32 = unet::Network<f32>;
/// Network at gradient-check precision.
pub type Network64 = unet::Network<f64>;
/// Batch at training precision.
pub type Batch32 = unet::Batch<f32>;

