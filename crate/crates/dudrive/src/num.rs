//! Scalar abstraction: all numeric code is generic over `Scalar`, which is
//! implemented for `f32` and `f64`. Training and persisted artifacts use
//! `f32`; verification code that needs 64-bit precision instantiates `f64`.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Sum<Self>
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn to_le_bytes_vec(&self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
    /// Size of one element in a checkpoint blob.
    fn byte_width() -> usize;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn to_le_bytes_vec(&self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    fn byte_width() -> usize {
        4
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn to_le_bytes_vec(&self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    fn byte_width() -> usize {
        8
    }
}

/// Shorthand for converting an `f64` constant into the working scalar type.
#[inline]
pub fn s<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("f64 -> scalar")
}
