//! Real-to-virtual domain unification for end-to-end steering prediction.
//!
//! A conditional generator maps "real" driving frames into a simplified
//! virtual domain; a steering predictor is trained jointly with the generator
//! and an adversarial discriminator. Several real domains can be unified into
//! one virtual domain served by a single global predictor. A deterministic
//! procedural driving world provides paired-domain data so the whole pipeline
//! runs at desk scale.
//!
//! Numeric code is generic over [`num::Scalar`] (`f32` or `f64`); training
//! and persisted artifacts use [`Real`], high-precision verification uses
//! [`Check`].

pub mod analysis;
pub mod error;
pub mod geometry;
pub mod models;
pub mod nn;
pub mod num;
pub mod rng;
pub mod synthworld;
pub mod training;
pub mod unification;

pub use error::{Error, Result};
pub use num::Scalar;

/// Scalar used for training and persisted artifacts.
pub type Real = f32;
/// Scalar used by verification code that needs 64-bit precision.
pub type Check = f64;
