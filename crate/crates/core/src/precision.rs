//! Scalar precision abstraction.
//!
//! Training and gradient oracles run in `f64`; wall-clock benchmarking runs in
//! `f32` so timings reflect the deployment dtype. Everything downstream is
//! generic over [`Real`] and the active precision is picked once at the entry
//! point (the CLI honours the `FG_PRECISION` environment variable).

use std::fmt::{Debug, Display};

/// On-disk / reported element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    /// Index maps in compacted checkpoints.
    U32,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
            Dtype::U32 => "u32",
        }
    }

    pub fn parse(s: &str) -> Option<Dtype> {
        match s {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            "u32" => Some(Dtype::U32),
            _ => None,
        }
    }
}

/// Floating-point scalar the whole crate is generic over.
pub trait Real:
    num_traits::Float + num_traits::NumAssignOps + Debug + Display + Send + Sync + 'static
{
    const DTYPE: Dtype;
    /// Max absolute deviation allowed when checking masked-vs-compacted
    /// forward equivalence (reassociation headroom in 32-bit).
    const EQUIV_TOL: f64;

    fn from_f64(v: f64) -> Self;
    fn to_f64_(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const EQUIV_TOL: f64 = 1e-12;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64_(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const EQUIV_TOL: f64 = 1e-5;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64_(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

/// Shorthand for `T::from_f64` in expression-heavy code.
#[inline]
pub fn re<T: Real>(v: f64) -> T {
    T::from_f64(v)
}
