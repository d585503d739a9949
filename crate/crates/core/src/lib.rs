//! Synthesis of handwritten-music staff images with three GAN variants and
//! quantitative evaluation of the results.
//!
//! The crate is organised around the pipeline stages:
//!
//! - [`dataprep`]: turn rectangular staff scans into square grayscale crops
//!   with deterministic manifests.
//! - [`traincore`]: configuration, seeding, checkpoints and loss logging
//!   shared by every model.
//! - [`dcgan`]: 64x64 baseline generator/discriminator with label smoothing.
//! - [`progan`]: progressive growing from 4x4 to 128x128 with WGAN-GP.
//! - [`cyclewgan`]: unpaired printed/handwritten translation with two ResNet
//!   generators, two Wasserstein critics and an L2 cycle loss.
//! - [`metrics`]: Inception Score, Frechet Inception Distance, Kernel
//!   Inception Distance and PCA projections behind a pluggable feature
//!   extractor.
//!
//! Everything runs on the CPU in double precision and is deterministic for a
//! fixed seed.

pub mod cyclewgan;
pub mod dataprep;
pub mod dcgan;
pub mod error;
pub mod metrics;
pub mod progan;
pub mod traincore;

pub use error::{Error, Result};
