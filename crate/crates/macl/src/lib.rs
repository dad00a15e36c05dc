//! Asymmetric two-branch contrastive pre-training for segmentation models,
//! with multi-level objectives (image-level, pixel-level, feature-level),
//! positive-pair mining by slice position, checkpoint transfer, supervised
//! fine-tuning, and a segmentation metric suite.
//!
//! The crate is organized around the pre-training pipeline:
//!
//! - [`synthdata`]: reproducible synthetic volumetric datasets and the
//!   position-based pair label construction.
//! - [`augment`]: the spatial-invariance / spatial-variance augmentation
//!   families and the alignment downsampling.
//! - [`nn`]: the minimal layer zoo (conv, instance norm, pooling, linear)
//!   with hand-written backward passes.
//! - [`model`]: shared encoder, partial decoder, projectors, and the
//!   two-branch forward/backward orchestration.
//! - [`losses`]: global contrastive loss, dense contrastive loss,
//!   equivariant regularization, and the weighted combination.
//! - [`oracle`]: independent brute-force loss references and a finite
//!   difference gradient checker. Never shares code with [`losses`].
//! - [`train`]: pre-training, checkpoint transfer, and fine-tuning loops.
//! - [`metrics`]: DSC / JC / HD95 / ASD and report aggregation.
//! - [`config`], [`ablation`], [`selftest`]: experiment configuration,
//!   sweep harness, and the built-in verification suite.

pub mod ablation;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod real;
pub mod selftest;
pub mod synthdata;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use real::Real;
