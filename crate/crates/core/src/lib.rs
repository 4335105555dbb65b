//! Accurate, adversarially robust and privacy-preserving EEG decoding.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: tensors, a small reverse-mode gradient tape and Jacobi
//!   eigendecomposition.
//! - [`data`]: trials, the binary trial format, a synthetic multi-user EEG
//!   generator and band-pass / resampling preprocessing.
//! - [`alignment`]: Euclidean alignment (covariance whitening).
//! - [`model`]: a compact EEGNet-style convolutional classifier.
//! - [`adversarial`]: PGD attacks and random-noise perturbations.
//! - [`training`]: CE / adversarial / source-augmented objectives, scale
//!   augmentation and seed ensembles.
//! - [`federated`]: simulated federated pretraining with BN-statistic policies.
//! - [`privacy`]: user-wise perturbations and the user-identity probe.
//! - [`eval`]: scenario orchestration, the benign/adversarial/noisy protocol and
//!   report rendering.

pub mod adversarial;
pub mod alignment;
pub mod data;
pub mod error;
pub mod eval;
pub mod federated;
pub mod model;
pub mod numerics;
pub mod privacy;
pub mod seed;
pub mod training;

pub use error::{Error, FormatError, Result};
pub use numerics::Tensor;
