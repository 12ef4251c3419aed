//! Volumetric lesion segmentation core.
//!
//! Everything in this crate is pure computation over in-memory buffers and
//! builds without `std` (only `alloc` is required):
//!
//! - [`autograd`]: dense N-C-D-H-W tensors with a reverse-mode gradient tape
//!   covering convolution, pooling, trilinear upsampling, instance norm,
//!   activations, squeeze-and-excitation primitives and the training losses.
//! - [`network`]: the SE-residual 3D U-Net assembled from those ops.
//! - [`preprocess`]: HU windowing, per-slice skull stripping, normalization
//!   and cropping.
//! - [`sampling`]: uniform / class-weighted training patch samplers and the
//!   overlapping inference grid.
//! - [`loss`], [`optim`], [`folds`]: training objective, Adam with a step
//!   schedule, and k-fold splitting.
//! - [`metrics`]: sliding-window inference, binarization and overlap metrics.
//! - [`phantom`]: a seeded synthetic head generator for desk-scale runs.
//!
//! File formats, the training driver and the CLI live in the `strokeseg`
//! companion crate.
#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod autograd;
pub mod error;
pub mod folds;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod phantom;
pub mod preprocess;
pub mod sampling;
pub mod scalar;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
