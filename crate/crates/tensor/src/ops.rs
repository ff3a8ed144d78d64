use std::rc::Rc;

use crate::kernels;
use crate::tensor::Op;
use crate::{check_finite, Result, Scalar, Tensor, TensorError};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn track2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.tracked() || b.tracked()
}

/// Normalized matmul dimensions: (batch, m, k, n).
pub(crate) fn mm_dims<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_b: bool,
) -> Result<(usize, usize, usize, usize)> {
    let (batch, m, k) = match a.shape() {
        [m, k] => (1, *m, *k),
        [b, m, k] => (*b, *m, *k),
        s => {
            return Err(TensorError::BadShape {
                op,
                shape: s.to_vec(),
                reason: "expected 2 or 3 dimensions".into(),
            })
        }
    };
    let (b_batch, bk, n) = match (b.shape(), trans_b) {
        ([k, n], false) => (1, *k, *n),
        ([n, k], true) => (1, *k, *n),
        ([bb, k, n], false) => (*bb, *k, *n),
        ([bb, n, k], true) => (*bb, *k, *n),
        (s, _) => {
            return Err(TensorError::BadShape {
                op,
                shape: s.to_vec(),
                reason: "expected 2 or 3 dimensions".into(),
            })
        }
    };
    if bk != k || b_batch != batch {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok((batch, m, k, n))
}

pub(crate) fn matmul_raw<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_b: bool,
) -> Result<(Vec<T>, Vec<usize>)> {
    let op = if trans_b { "matmul_nt" } else { "matmul" };
    let (batch, m, k, n) = mm_dims(op, a, b, trans_b)?;
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let ab = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bb = &b.data()[bi * k * n..(bi + 1) * k * n];
        let cb = &mut out[bi * m * n..(bi + 1) * m * n];
        if trans_b {
            kernels::gemm_nt(ab, bb, cb, m, k, n);
        } else {
            kernels::gemm_nn(ab, bb, cb, m, k, n);
        }
    }
    let shape = if a.shape().len() == 2 {
        vec![m, n]
    } else {
        vec![batch, m, n]
    };
    Ok((out, shape))
}

impl<T: Scalar> Tensor<T> {
    fn unary(
        &self,
        op_name: &'static str,
        f: impl Fn(T) -> T,
        op: impl FnOnce(Tensor<T>) -> Op<T>,
    ) -> Result<Tensor<T>> {
        let data: Vec<T> = self.data().iter().map(|&v| f(v)).collect();
        check_finite(op_name, &data)?;
        let rec = self.tracked().then(|| op(self.clone()));
        Ok(Tensor::make(data, self.shape().to_vec(), rec, false))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        check_finite("add", &data)?;
        let rec = track2(self, other).then(|| Op::Add(self.clone(), other.clone()));
        Ok(Tensor::make(data, self.shape().to_vec(), rec, false))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        check_finite("sub", &data)?;
        let rec = track2(self, other).then(|| Op::Sub(self.clone(), other.clone()));
        Ok(Tensor::make(data, self.shape().to_vec(), rec, false))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        check_finite("mul", &data)?;
        let rec = track2(self, other).then(|| Op::Mul(self.clone(), other.clone()));
        Ok(Tensor::make(data, self.shape().to_vec(), rec, false))
    }

    pub fn add_scalar(&self, c: T) -> Result<Tensor<T>> {
        self.unary("add_scalar", |v| v + c, Op::AddScalar)
    }

    pub fn mul_scalar(&self, c: T) -> Result<Tensor<T>> {
        self.unary("mul_scalar", |v| v * c, |t| Op::MulScalar(t, c))
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.mul_scalar(-T::one())
    }

    pub fn abs(&self) -> Result<Tensor<T>> {
        self.unary("abs", |v| v.abs(), Op::Abs)
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        self.unary("sqrt", |v| v.sqrt(), Op::Sqrt)
    }

    pub fn silu(&self) -> Result<Tensor<T>> {
        self.unary("silu", kernels::silu, Op::Silu)
    }

    pub fn gelu(&self) -> Result<Tensor<T>> {
        self.unary("gelu", kernels::gelu, Op::Gelu)
    }

    /// `self @ b`; both operands 2-D, or both 3-D with equal batch.
    pub fn matmul(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape) = matmul_raw(self, b, false)?;
        check_finite("matmul", &data)?;
        let rec = track2(self, b).then(|| Op::Matmul {
            a: self.clone(),
            b: b.clone(),
            trans_b: false,
        });
        Ok(Tensor::make(data, shape, rec, false))
    }

    /// `self @ b^T` with `b` stored `[n, k]` (or `[batch, n, k]`).
    pub fn matmul_nt(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape) = matmul_raw(self, b, true)?;
        check_finite("matmul_nt", &data)?;
        let rec = track2(self, b).then(|| Op::Matmul {
            a: self.clone(),
            b: b.clone(),
            trans_b: true,
        });
        Ok(Tensor::make(data, shape, rec, false))
    }

    /// 2-D convolution, NCHW input, `[c_out, c_in, kh, kw]` weight.
    pub fn conv2d(&self, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        let (bsz, c_in, h, width) = self.dims4("conv2d")?;
        let (c_out, wc_in, kh, kw) = w.dims4("conv2d")?;
        if wc_in != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let oh = kernels::conv_out_extent(h, kh, stride, pad);
        let ow = kernels::conv_out_extent(width, kw, stride, pad);
        let l = oh * ow;
        let ck = c_in * kh * kw;
        let mut out = vec![T::zero(); bsz * c_out * l];
        let mut cols = vec![T::zero(); ck * l];
        for bi in 0..bsz {
            kernels::im2col(
                &self.data()[bi * c_in * h * width..(bi + 1) * c_in * h * width],
                c_in,
                h,
                width,
                kh,
                kw,
                stride,
                pad,
                &mut cols,
            );
            kernels::gemm_nn(
                w.data(),
                &cols,
                &mut out[bi * c_out * l..(bi + 1) * c_out * l],
                c_out,
                ck,
                l,
            );
        }
        check_finite("conv2d", &out)?;
        let rec = track2(self, w).then(|| Op::Conv2d {
            x: self.clone(),
            w: w.clone(),
            stride,
            pad,
        });
        Ok(Tensor::make(out, vec![bsz, c_out, oh, ow], rec, false))
    }

    /// x[B,C,H,W] + b[C], broadcast over batch and space.
    pub fn add_channel_bias(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (bsz, c, h, w) = self.dims4("add_channel_bias")?;
        if b.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: self.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut data = self.to_vec();
        for bi in 0..bsz {
            for ci in 0..c {
                let bias = b.data()[ci];
                let base = (bi * c + ci) * hw;
                for v in &mut data[base..base + hw] {
                    *v = *v + bias;
                }
            }
        }
        check_finite("add_channel_bias", &data)?;
        let rec = track2(self, b).then(|| Op::AddChannelBias(self.clone(), b.clone()));
        Ok(Tensor::make(data, self.shape().to_vec(), rec, false))
    }

    /// x[B,C,H,W] + b[B,C]; per-sample channel bias (timestep embeddings).
    pub fn add_batch_channel_bias(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (bsz, c, h, w) = self.dims4("add_batch_channel_bias")?;
        if b.shape() != [bsz, c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_batch_channel_bias",
                lhs: self.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut data = self.to_vec();
        for bi in 0..bsz {
            for ci in 0..c {
                let bias = b.data()[bi * c + ci];
                let base = (bi * c + ci) * hw;
                for v in &mut data[base..base + hw] {
                    *v = *v + bias;
                }
            }
        }
        check_finite("add_batch_channel_bias", &data)?;
        let rec = track2(self, b).then(|| Op::AddBatchChannelBias(self.clone(), b.clone()));
        Ok(Tensor::make(data, self.shape().to_vec(), rec, false))
    }

    /// x[N,C] + b[C], broadcast over rows.
    pub fn add_row_bias(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c) = self.dims2("add_row_bias")?;
        if b.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut data = self.to_vec();
        for r in 0..n {
            for ci in 0..c {
                data[r * c + ci] = data[r * c + ci] + b.data()[ci];
            }
        }
        check_finite("add_row_bias", &data)?;
        let rec = track2(self, b).then(|| Op::AddRowBias(self.clone(), b.clone()));
        Ok(Tensor::make(data, self.shape().to_vec(), rec, false))
    }

    /// Group normalization over NCHW with per-channel affine parameters.
    pub fn group_norm(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        groups: usize,
        eps: f64,
    ) -> Result<Tensor<T>> {
        let (bsz, c, h, w) = self.dims4("group_norm")?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "group_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::BadShape {
                op: "group_norm",
                shape: self.shape().to_vec(),
                reason: format!("{c} channels not divisible into {groups} groups"),
            });
        }
        let eps = T::from_f64(eps);
        let cg = c / groups;
        let m = cg * h * w;
        let m_t = T::from_f64(m as f64);
        let mut xhat = vec![T::zero(); self.numel()];
        let mut inv_std = vec![T::zero(); bsz * groups];
        let mut out = vec![T::zero(); self.numel()];
        for bi in 0..bsz {
            for g in 0..groups {
                let base = (bi * c + g * cg) * h * w;
                let slice = &self.data()[base..base + m];
                let mut mean = T::zero();
                for &v in slice {
                    mean = mean + v;
                }
                mean = mean / m_t;
                let mut var = T::zero();
                for &v in slice {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var / m_t;
                let istd = T::one() / (var + eps).sqrt();
                inv_std[bi * groups + g] = istd;
                for (i, &v) in slice.iter().enumerate() {
                    xhat[base + i] = (v - mean) * istd;
                }
            }
            for ci in 0..c {
                let ga = gamma.data()[ci];
                let be = beta.data()[ci];
                let base = (bi * c + ci) * h * w;
                for i in 0..h * w {
                    out[base + i] = ga * xhat[base + i] + be;
                }
            }
        }
        check_finite("group_norm", &out)?;
        let rec = (self.tracked() || gamma.tracked() || beta.tracked()).then(|| Op::GroupNorm {
            x: self.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            groups,
            xhat: Tensor::make(xhat, self.shape().to_vec(), None, false),
            inv_std: Tensor::make(inv_std, vec![bsz * groups], None, false),
        });
        Ok(Tensor::make(out, self.shape().to_vec(), rec, false))
    }

    /// Numerically stable softmax along the last dimension.
    pub fn softmax_last(&self) -> Result<Tensor<T>> {
        let n = *self.shape().last().ok_or_else(|| TensorError::BadShape {
            op: "softmax_last",
            shape: vec![],
            reason: "empty shape".into(),
        })?;
        let rows = self.numel() / n;
        let mut data = vec![T::zero(); self.numel()];
        for r in 0..rows {
            let src = &self.data()[r * n..(r + 1) * n];
            let max = src.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            let dst = &mut data[r * n..(r + 1) * n];
            for (d, &v) in dst.iter_mut().zip(src) {
                let e = (v - max).exp();
                *d = e;
                sum = sum + e;
            }
            for d in dst.iter_mut() {
                *d = *d / sum;
            }
        }
        check_finite("softmax_last", &data)?;
        let rec = self.tracked().then(|| Op::SoftmaxLast(self.clone()));
        Ok(Tensor::make(data, self.shape().to_vec(), rec, false))
    }

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let mut acc = T::zero();
        for &v in self.data() {
            acc = acc + v;
        }
        check_finite("sum_all", &[acc])?;
        let rec = self.tracked().then(|| Op::SumAll(self.clone()));
        Ok(Tensor::make(vec![acc], vec![1], rec, false))
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let mut acc = T::zero();
        for &v in self.data() {
            acc = acc + v;
        }
        let mean = acc / T::from_f64(self.numel() as f64);
        check_finite("mean_all", &[mean])?;
        let rec = self.tracked().then(|| Op::MeanAll(self.clone()));
        Ok(Tensor::make(vec![mean], vec![1], rec, false))
    }

    /// Same data, new shape (row-major contiguous, so this is free).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::BadShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("incompatible with {} elements", self.numel()),
            });
        }
        let rec = self.tracked().then(|| Op::Reshape(self.clone()));
        Ok(Tensor::make(self.to_vec(), shape.to_vec(), rec, false))
    }

    /// Concatenate two NCHW tensors along the channel dimension.
    pub fn concat_channels(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (ba, ca, ha, wa) = a.dims4("concat_channels")?;
        let (bb, cb, hb, wb) = b.dims4("concat_channels")?;
        if ba != bb || ha != hb || wa != wb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let hw = ha * wa;
        let mut data = Vec::with_capacity((ca + cb) * ba * hw);
        for bi in 0..ba {
            data.extend_from_slice(&a.data()[bi * ca * hw..(bi + 1) * ca * hw]);
            data.extend_from_slice(&b.data()[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let rec = track2(a, b).then(|| Op::ConcatChannels(a.clone(), b.clone()));
        Ok(Tensor::make(data, vec![ba, ca + cb, ha, wa], rec, false))
    }

    /// Concatenate two 2-D tensors along the row dimension.
    pub fn concat_rows(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (na, ca) = a.dims2("concat_rows")?;
        let (nb, cb) = b.dims2("concat_rows")?;
        if ca != cb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut data = a.to_vec();
        data.extend_from_slice(b.data());
        let rec = track2(a, b).then(|| Op::ConcatRows(a.clone(), b.clone()));
        Ok(Tensor::make(data, vec![na + nb, ca], rec, false))
    }

    /// Contiguous row slice of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (n, c) = self.dims2("slice_rows")?;
        if start + len > n {
            return Err(TensorError::BadShape {
                op: "slice_rows",
                shape: self.shape().to_vec(),
                reason: format!("slice {start}..{} out of {n} rows", start + len),
            });
        }
        let data = self.data()[start * c..(start + len) * c].to_vec();
        let rec = self.tracked().then(|| Op::SliceRows {
            x: self.clone(),
            start,
        });
        Ok(Tensor::make(data, vec![len, c], rec, false))
    }

    /// Gather rows of a 2-D tensor; backward scatter-adds.
    pub fn index_select_rows(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let (n, c) = self.dims2("index_select_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::BadShape {
                op: "index_select_rows",
                shape: self.shape().to_vec(),
                reason: format!("index {bad} out of {n} rows"),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&self.data()[i * c..(i + 1) * c]);
        }
        let rec = self.tracked().then(|| Op::IndexSelectRows {
            x: self.clone(),
            idx: Rc::new(idx.to_vec()),
        });
        Ok(Tensor::make(data, vec![idx.len(), c], rec, false))
    }

    /// Nearest-neighbor 2x spatial upsample of NCHW.
    pub fn upsample_nearest_2x(&self) -> Result<Tensor<T>> {
        let (bsz, c, h, w) = self.dims4("upsample_nearest_2x")?;
        let mut data = vec![T::zero(); bsz * c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for bc in 0..bsz * c {
            let src = &self.data()[bc * h * w..(bc + 1) * h * w];
            let dst = &mut data[bc * oh * ow..(bc + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let rec = self.tracked().then(|| Op::UpsampleNearest2x(self.clone()));
        Ok(Tensor::make(data, vec![bsz, c, oh, ow], rec, false))
    }

    /// [B,C,H,W] -> [B, H*W, C] token layout.
    pub fn nchw_to_tokens(&self) -> Result<Tensor<T>> {
        let (bsz, c, h, w) = self.dims4("nchw_to_tokens")?;
        let hw = h * w;
        let mut data = vec![T::zero(); self.numel()];
        for bi in 0..bsz {
            for ci in 0..c {
                for p in 0..hw {
                    data[(bi * hw + p) * c + ci] = self.data()[(bi * c + ci) * hw + p];
                }
            }
        }
        let rec = self.tracked().then(|| Op::NchwToTokens(self.clone()));
        Ok(Tensor::make(data, vec![bsz, hw, c], rec, false))
    }

    /// [B, H*W, C] -> [B,C,H,W].
    pub fn tokens_to_nchw(&self, h: usize, w: usize) -> Result<Tensor<T>> {
        let (bsz, l, c) = self.dims3("tokens_to_nchw")?;
        if l != h * w {
            return Err(TensorError::BadShape {
                op: "tokens_to_nchw",
                shape: self.shape().to_vec(),
                reason: format!("{l} tokens != {h}x{w}"),
            });
        }
        let mut data = vec![T::zero(); self.numel()];
        for bi in 0..bsz {
            for ci in 0..c {
                for p in 0..l {
                    data[(bi * c + ci) * l + p] = self.data()[(bi * l + p) * c + ci];
                }
            }
        }
        let rec = self.tracked().then(|| Op::TokensToNchw(self.clone()));
        Ok(Tensor::make(data, vec![bsz, c, h, w], rec, false))
    }

    /// [B, L, C] -> [B*heads, L, C/heads].
    pub fn split_heads(&self, heads: usize) -> Result<Tensor<T>> {
        let (bsz, l, c) = self.dims3("split_heads")?;
        if heads == 0 || c % heads != 0 {
            return Err(TensorError::BadShape {
                op: "split_heads",
                shape: self.shape().to_vec(),
                reason: format!("{c} channels not divisible into {heads} heads"),
            });
        }
        let hd = c / heads;
        let mut data = vec![T::zero(); self.numel()];
        for bi in 0..bsz {
            for hi in 0..heads {
                for p in 0..l {
                    let src = (bi * l + p) * c + hi * hd;
                    let dst = ((bi * heads + hi) * l + p) * hd;
                    data[dst..dst + hd].copy_from_slice(&self.data()[src..src + hd]);
                }
            }
        }
        let rec = self.tracked().then(|| Op::SplitHeads {
            x: self.clone(),
            heads,
        });
        Ok(Tensor::make(data, vec![bsz * heads, l, hd], rec, false))
    }

    /// [B*heads, L, C/heads] -> [B, L, C]; inverse of `split_heads`.
    pub fn merge_heads(&self, heads: usize) -> Result<Tensor<T>> {
        let (bh, l, hd) = self.dims3("merge_heads")?;
        if heads == 0 || bh % heads != 0 {
            return Err(TensorError::BadShape {
                op: "merge_heads",
                shape: self.shape().to_vec(),
                reason: format!("batch {bh} not divisible by {heads} heads"),
            });
        }
        let bsz = bh / heads;
        let c = heads * hd;
        let mut data = vec![T::zero(); self.numel()];
        for bi in 0..bsz {
            for hi in 0..heads {
                for p in 0..l {
                    let src = ((bi * heads + hi) * l + p) * hd;
                    let dst = (bi * l + p) * c + hi * hd;
                    data[dst..dst + hd].copy_from_slice(&self.data()[src..src + hd]);
                }
            }
        }
        let rec = self.tracked().then(|| Op::MergeHeads {
            x: self.clone(),
            heads,
        });
        Ok(Tensor::make(data, vec![bsz, l, c], rec, false))
    }
}

/// Scaled dot-product attention over `[B, L, C]` token batches.
///
/// Composed from recorded primitives, so it is differentiable without a
/// dedicated backward rule.
pub fn scaled_dot_product_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    same_shape("attention", q, k)?;
    same_shape("attention", q, v)?;
    let (_, _, c) = q.dims3("attention")?;
    if heads == 0 || c % heads != 0 {
        return Err(TensorError::BadShape {
            op: "attention",
            shape: q.shape().to_vec(),
            reason: format!("{c} channels not divisible into {heads} heads"),
        });
    }
    let hd = c / heads;
    let qh = q.split_heads(heads)?;
    let kh = k.split_heads(heads)?;
    let vh = v.split_heads(heads)?;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let scores = qh.matmul_nt(&kh)?.mul_scalar(scale)?;
    let weights = scores.softmax_last()?;
    let out = weights.matmul(&vh)?;
    out.merge_heads(heads)
}

/// Mean squared error between two same-shape tensors.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let d = a.sub(b)?;
    d.mul(&d)?.mean_all()
}

/// Mean absolute error between two same-shape tensors.
pub fn l1<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.sub(b)?.abs()?.mean_all()
}
