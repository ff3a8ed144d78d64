use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Result, Scalar, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// How a tensor was produced, with the operands saved for the backward pass.
#[derive(Clone)]
pub(crate) enum Op<T: Scalar> {
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    AddScalar(Tensor<T>),
    MulScalar(Tensor<T>, T),
    Abs(Tensor<T>),
    Sqrt(Tensor<T>),
    Silu(Tensor<T>),
    Gelu(Tensor<T>),
    /// `c = a @ b` (or `a @ b^T`), batched over the leading dimension.
    Matmul {
        a: Tensor<T>,
        b: Tensor<T>,
        trans_b: bool,
    },
    Conv2d {
        x: Tensor<T>,
        w: Tensor<T>,
        stride: usize,
        pad: usize,
    },
    /// x[B,C,H,W] + b[C]
    AddChannelBias(Tensor<T>, Tensor<T>),
    /// x[B,C,H,W] + b[B,C]
    AddBatchChannelBias(Tensor<T>, Tensor<T>),
    /// x[N,C] + b[C]
    AddRowBias(Tensor<T>, Tensor<T>),
    GroupNorm {
        x: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        groups: usize,
        /// Saved normalized activations, shape of `x`.
        xhat: Tensor<T>,
        /// Saved 1/std per (batch, group).
        inv_std: Tensor<T>,
    },
    SoftmaxLast(Tensor<T>),
    MeanAll(Tensor<T>),
    SumAll(Tensor<T>),
    Reshape(Tensor<T>),
    ConcatChannels(Tensor<T>, Tensor<T>),
    ConcatRows(Tensor<T>, Tensor<T>),
    SliceRows {
        x: Tensor<T>,
        start: usize,
    },
    IndexSelectRows {
        x: Tensor<T>,
        idx: Rc<Vec<usize>>,
    },
    UpsampleNearest2x(Tensor<T>),
    NchwToTokens(Tensor<T>),
    TokensToNchw(Tensor<T>),
    SplitHeads {
        x: Tensor<T>,
        heads: usize,
    },
    MergeHeads {
        x: Tensor<T>,
        heads: usize,
    },
    Fft2Re(Tensor<T>),
    Fft2Im(Tensor<T>),
    Ifft2Real {
        re: Tensor<T>,
        im: Tensor<T>,
    },
}

pub(crate) struct Inner<T: Scalar> {
    pub(crate) id: u64,
    pub(crate) data: Vec<T>,
    pub(crate) shape: Vec<usize>,
    pub(crate) op: Option<Op<T>>,
    pub(crate) is_var: bool,
}

/// Dense n-dimensional array, row-major, immutable after construction.
///
/// Cloning is cheap (reference count). A tensor either is a trainable
/// leaf (`var`), the result of a recorded op, or a plain constant.
pub struct Tensor<T: Scalar = f32>(pub(crate) Rc<Inner<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.0.id, self.0.shape)
    }
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn make(data: Vec<T>, shape: Vec<usize>, op: Option<Op<T>>, is_var: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let op = if crate::grad_enabled() { op } else { None };
        Tensor(Rc::new(Inner {
            id: fresh_id(),
            data,
            shape,
            op,
            is_var,
        }))
    }

    /// Plain constant tensor.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::BadShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("shape product != data length {}", data.len()),
            });
        }
        Ok(Self::make(data, shape.to_vec(), None, false))
    }

    /// Trainable leaf; gradients accumulate for it during backward.
    pub fn var(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(Tensor(Rc::new(Inner {
            id: fresh_id(),
            data: t.0.data.clone(),
            shape: t.0.shape.clone(),
            op: None,
            is_var: true,
        })))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::make(vec![T::zero(); n], shape.to_vec(), None, false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::make(vec![T::one(); n], shape.to_vec(), None, false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::make(vec![value; n], shape.to_vec(), None, false)
    }

    pub fn scalar(value: T) -> Self {
        Self::make(vec![value], vec![1], None, false)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn is_var(&self) -> bool {
        self.0.is_var
    }

    pub(crate) fn op(&self) -> Option<&Op<T>> {
        self.0.op.as_ref()
    }

    /// Whether this tensor participates in gradient recording.
    pub fn tracked(&self) -> bool {
        self.0.is_var || self.0.op.is_some()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.0.data[0]
    }

    /// Same data, cut loose from the recorded graph.
    pub fn detach(&self) -> Self {
        Tensor(Rc::new(Inner {
            id: fresh_id(),
            data: self.0.data.clone(),
            shape: self.0.shape.clone(),
            op: None,
            is_var: false,
        }))
    }

    /// Detached copy that is a fresh trainable leaf.
    pub fn detach_var(&self) -> Self {
        Tensor(Rc::new(Inner {
            id: fresh_id(),
            data: self.0.data.clone(),
            shape: self.0.shape.clone(),
            op: None,
            is_var: true,
        }))
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [a, b] => Ok((*a, *b)),
            s => Err(TensorError::BadShape {
                op,
                shape: s.to_vec(),
                reason: "expected 2 dimensions".into(),
            }),
        }
    }

    pub(crate) fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape() {
            [a, b, c] => Ok((*a, *b, *c)),
            s => Err(TensorError::BadShape {
                op,
                shape: s.to_vec(),
                reason: "expected 3 dimensions".into(),
            }),
        }
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape() {
            [a, b, c, d] => Ok((*a, *b, *c, *d)),
            s => Err(TensorError::BadShape {
                op,
                shape: s.to_vec(),
                reason: "expected 4 dimensions".into(),
            }),
        }
    }
}
