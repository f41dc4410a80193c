//! Core engine for volumetric brain-tumor segmentation: dense tensors,
//! tape-based reverse-mode automatic differentiation, an attention-fused
//! 3D U-Net, the Adam optimizer, preprocessing math, and counting metrics.
//!
//! This crate is `no_std` (with `alloc`); everything here is pure
//! computation. File formats, training orchestration, and the command-line
//! front end live in the companion `voxseg` crate.

#![no_std]

extern crate alloc;

pub mod adam;
pub mod attention;
pub mod conv;
pub mod gemm;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use tensor::{LabelGrid, Real, Tensor};
