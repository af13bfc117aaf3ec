//! Affine-combining autoencoder for unifying 3D human pose formats.
//!
//! The crate fits a low-dimensional set of latent keypoints from which every
//! joint of every skeleton convention is an affine combination, and uses the
//! frozen model to train and evaluate pose estimators against inconsistent
//! partial labels.

pub mod acae;
pub mod consistency;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod reduce;
pub mod seed;
pub mod skeleton;
pub mod training;

pub use error::{AcaeError, Result};
