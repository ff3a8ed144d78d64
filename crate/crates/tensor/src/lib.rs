//! Dense tensor engine with reverse-mode differentiation.
//!
//! Tensors are immutable, reference-counted, row-major buffers. Every
//! operation that produces a tensor records how it was produced, so a
//! backward pass can be run from any scalar result (see [`backprop`]).
//! The op set is the one the rest of the workspace needs: elementwise
//! arithmetic, matmul, conv2d, normalization, attention plumbing, and a
//! differentiable radix-2 2-D FFT.
//!
//! Training runs in `f32`; gradient checks instantiate the same code at
//! `f64` (see [`Scalar`]). Kernels are single-threaded with fixed
//! reduction order so a fixed seed reproduces runs bit-for-bit.

#![forbid(unsafe_code)]

pub mod backprop;
pub mod check;
pub mod fft;
mod kernels;
mod ops;
mod tensor;

use std::cell::Cell;

pub use backprop::{backward, GradStore, Tape};
pub use fft::ComplexTensor;
pub use ops::{l1, mse, scaled_dot_product_attention};
pub use tensor::Tensor;

/// Element type of a tensor as persisted on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U32,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point element type the engine is generic over.
///
/// `f32` is the training default; `f64` exists for finite-difference
/// gradient checks where `f32` rounding would swamp the comparison.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Default + Copy + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Errors produced by tensor construction and ops.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported shape {shape:?} ({reason})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: extent {extent} is not a power of two (radix-2 FFT restriction)")]
    NonPowerOfTwo { op: &'static str, extent: usize },
    #[error("{op}: produced a non-finite value")]
    NotFinite { op: &'static str },
    #[error("backward: output must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NAN_CHECK: Cell<Option<bool>> = const { Cell::new(None) };
}

/// Run `f` without recording operations; results are plain values.
///
/// Used by inference, sampling chains, and data generation so that long
/// loops do not accumulate graph history.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    GRAD_ENABLED.with(|g| {
        let prev = g.get();
        g.set(false);
        let out = f();
        g.set(prev);
        out
    })
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Whether forward kernels scan their output for NaN/Inf.
///
/// Defaults to on in debug builds; `LATENTSR_NAN_CHECK=0|1` overrides.
pub(crate) fn nan_check_enabled() -> bool {
    NAN_CHECK.with(|c| {
        if let Some(v) = c.get() {
            return v;
        }
        let v = match std::env::var("LATENTSR_NAN_CHECK") {
            Ok(s) => s != "0",
            Err(_) => cfg!(debug_assertions),
        };
        c.set(Some(v));
        v
    })
}

pub(crate) fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if nan_check_enabled() && data.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NotFinite { op });
    }
    Ok(())
}
