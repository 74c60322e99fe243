//! Hybrid Siamese/asymmetric convolutional network for matching image patches
//! captured by two different sensors.
//!
//! The crate is `no_std` (it needs `alloc`) and carries all of the numerical
//! work: a small dense tensor type with a reverse-mode tape, the hybrid
//! network and its losses, patch-level data transforms and a synthetic
//! multimodal generator, hard negative mining, the SGD trainer, and the
//! FPR95 / ROC / KNN evaluation routines. File formats, image decoding and
//! the command line live in the `hybridnet` crate.
//!
//! Enable the `std` feature to let the GEMM kernels pick AVX/FMA paths at
//! runtime.

#![no_std]

extern crate alloc;

pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod mining;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Side length of every patch consumed by the network.
pub const PATCH_SIZE: usize = 64;

/// Number of pixels in one patch.
pub const PATCH_PIXELS: usize = PATCH_SIZE * PATCH_SIZE;

/// Width of every branch output and of the hybrid encodings.
pub const DESCRIPTOR_DIM: usize = 128;
