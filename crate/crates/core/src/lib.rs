//! Continual anti-spoofing training with adversarial-perturbation rehearsal.
//!
//! A binary bona-fide/spoof detector is trained stage by stage on a stream of
//! synthetic audio domains. After each stage a universal adversarial
//! perturbation (UAP) is generated against the trained model and kept in a
//! pool; later stages replay bona-fide samples plus a pooled UAP as
//! pseudo-spoofed rehearsal data and regularize with knowledge distillation
//! against the previous stage's model, so earlier spoof distributions are not
//! forgotten even though earlier training data is never read again.
//!
//! Module map:
//! - [`tensor`]: dense f64 tensors, reverse-mode autodiff tape, gradient checks,
//!   and the `UFT1` binary tensor format shared by all on-disk artifacts.
//! - [`data`]: synthetic multi-domain clip generation, per-sample
//!   normalization, fixed-length cropping, the frozen feature extractor, and
//!   clip/feature file I/O.
//! - [`classifier`]: the trainable encoder-stack detector plus checkpointing.
//! - [`uap`]: L-inf constrained perturbation generation (feature- and
//!   waveform-level), fooling-rate evaluation, and the on-disk UAP pool.
//! - [`continual`]: stage-wise training, rehearsal batches, distillation
//!   losses, sequence orchestration, and the data-access audit.
//! - [`metrics`], [`pca`], [`report`]: EER scoring, embedding projection, and
//!   the per-run report artifacts.

pub mod classifier;
pub mod config;
pub mod continual;
pub mod data;
pub mod dump;
pub mod error;
pub mod metrics;
pub mod pca;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod uap;

pub use error::{Error, Result};
pub use tensor::Tensor;
