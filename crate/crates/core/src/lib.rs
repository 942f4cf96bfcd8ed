//! Deformable registration of 3D volumes with a small fully convolutional
//! network trained purely by self-supervision.
//!
//! The network takes a `(fixed, moving)` pair, predicts dense displacement
//! fields at three pyramid levels and is optimized to maximize normalized
//! cross-correlation between the fixed image and the warped moving image,
//! regularized by the total variation of each field. The same machinery
//! serves single-pair optimization and feedforward inference on new pairs.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix the production precision.

pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod layers;
pub mod losses;
pub mod network;
pub mod scalar;
pub mod training;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use volume::{Dims, FeatureMap, LabelVolume, Volume};
pub use warp::DeformationField;

/// Production precision.
pub type Real = f32;

pub type Volume32 = Volume<f32>;
pub type Volume64 = Volume<f64>;
pub type Field32 = DeformationField<f32>;
pub type Field64 = DeformationField<f64>;
pub type RegNet32 = network::RegNetParams<f32>;
pub type RegNet64 = network::RegNetParams<f64>;
