//! Volumetric brain-tumor segmentation pipeline: NIfTI-1 ingestion,
//! preprocessing, synthetic fixtures, training, evaluation, prediction
//! overlays, and SVG metric plots. All model math lives in `voxseg-core`.

pub mod cli;
pub mod config;
pub mod nifti;
pub mod overlay;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod store;
pub mod synth;
pub mod trainer;
