//! Floating-point abstraction so every module runs in f32 or f64.
//!
//! f64 is required for finite-difference gradient checks; f32 is the faster
//! training default. The precision choice is made once at the entry point and
//! threaded through as a type parameter.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Element dtype tag used in checkpoint records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Real scalar usable as tensor element.
pub trait Scalar:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Numerical constants shared across the crate. Centralized so no module
/// invents its own epsilon.
pub mod eps {
    /// Added inside the square root of layer normalization.
    pub const LAYER_NORM: f64 = 1e-5;
    /// Added inside the square root of batch normalization.
    pub const BATCH_NORM: f64 = 1e-5;
    /// Lower bound on vector norms in cosine similarity.
    pub const COSINE: f64 = 1e-8;
    /// Lower bound on the per-channel std in instance normalization.
    pub const INSTANCE_NORM: f64 = 1e-5;
    /// Momentum for batch-norm running statistics.
    pub const BN_MOMENTUM: f64 = 0.1;
}
