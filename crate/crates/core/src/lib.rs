//! Complementary channel-masked autoencoder pre-training for multichannel
//! sleep recordings, with inter-channel contrastive learning, downstream
//! classification heads, and a subject-wise evaluation protocol.
//!
//! Numeric code is generic over [`Scalar`] (`f32` and `f64`). Training and
//! checkpoints use `f32`; reference and gradient checks use `f64`. The aliases
//! below name the common concrete instantiations.

pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod masking;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod signal;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Epoch = signal::EpochMatrix<f32>;
pub type Epoch64 = signal::EpochMatrix<f64>;
pub type Segmented = signal::SegmentedEpoch<f32>;
pub type Segmented64 = signal::SegmentedEpoch<f64>;
pub type Model = model::ModelParams<f32>;
pub type Model64 = model::ModelParams<f64>;
pub type Features = model::FeatureSequence<f32>;
