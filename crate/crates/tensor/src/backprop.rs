//! Reverse-mode differentiation over the recorded op graph.
//!
//! Ops only record themselves when an input is tracked, and every
//! tracked chain bottoms out at a `var` leaf, so the reachable tracked
//! set is exactly the set of nodes that need gradients. Node ids grow
//! monotonically with creation and ops only reference earlier tensors,
//! so sorting by id recovers execution order.

use std::collections::{HashMap, HashSet};

use crate::fft::grad as fft_grad;
use crate::kernels;
use crate::ops::mm_dims;
use crate::tensor::Op;
use crate::{no_grad, Result, Scalar, Tensor, TensorError};

/// The recorded computation, in execution order.
pub struct Tape<T: Scalar> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Scalar> Tape<T> {
    /// Collect every tracked node reachable from `output`.
    pub fn from_output(output: &Tensor<T>) -> Self {
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Tensor<T>> = Vec::new();
        let mut stack: Vec<Tensor<T>> = Vec::new();
        if output.tracked() {
            stack.push(output.clone());
            seen.insert(output.id());
        }
        while let Some(t) = stack.pop() {
            if let Some(op) = t.op() {
                for parent in op_inputs(op) {
                    if parent.tracked() && seen.insert(parent.id()) {
                        stack.push(parent.clone());
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| t.id());
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node ids in execution order.
    pub fn node_ids(&self) -> Vec<u64> {
        self.nodes.iter().map(|t| t.id()).collect()
    }
}

fn op_inputs<T: Scalar>(op: &Op<T>) -> Vec<&Tensor<T>> {
    match op {
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddChannelBias(a, b)
        | Op::AddBatchChannelBias(a, b)
        | Op::AddRowBias(a, b)
        | Op::ConcatChannels(a, b)
        | Op::ConcatRows(a, b) => vec![a, b],
        Op::AddScalar(a)
        | Op::MulScalar(a, _)
        | Op::Abs(a)
        | Op::Sqrt(a)
        | Op::Silu(a)
        | Op::Gelu(a)
        | Op::SoftmaxLast(a)
        | Op::MeanAll(a)
        | Op::SumAll(a)
        | Op::Reshape(a)
        | Op::UpsampleNearest2x(a)
        | Op::NchwToTokens(a)
        | Op::TokensToNchw(a)
        | Op::Fft2Re(a)
        | Op::Fft2Im(a) => vec![a],
        Op::Matmul { a, b, .. } => vec![a, b],
        Op::Conv2d { x, w, .. } => vec![x, w],
        Op::GroupNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
        Op::SliceRows { x, .. }
        | Op::IndexSelectRows { x, .. }
        | Op::SplitHeads { x, .. }
        | Op::MergeHeads { x, .. } => vec![x],
        Op::Ifft2Real { re, im } => vec![re, im],
    }
}

/// Gradients keyed by tensor identity.
pub struct GradStore<T: Scalar> {
    grads: HashMap<u64, Tensor<T>>,
}

impl<T: Scalar> GradStore<T> {
    fn new() -> Self {
        GradStore {
            grads: HashMap::new(),
        }
    }

    pub fn get(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        self.grads.get(&t.id())
    }

    pub fn contains(&self, t: &Tensor<T>) -> bool {
        self.grads.contains_key(&t.id())
    }

    /// Ids of every tensor that received a gradient.
    pub fn ids(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.grads.keys().copied().collect();
        v.sort_unstable();
        v
    }

    fn accumulate(&mut self, target: &Tensor<T>, grad: Tensor<T>) {
        debug_assert_eq!(target.shape(), grad.shape());
        match self.grads.remove(&target.id()) {
            Some(existing) => {
                let data: Vec<T> = existing
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&a, &b)| a + b)
                    .collect();
                self.grads
                    .insert(target.id(), plain(data, target.shape().to_vec()));
            }
            None => {
                self.grads.insert(target.id(), grad);
            }
        }
    }
}

fn plain<T: Scalar>(data: Vec<T>, shape: Vec<usize>) -> Tensor<T> {
    Tensor::make(data, shape, None, false)
}

/// Run the backward pass from a scalar output.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<GradStore<T>> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    let tape = Tape::from_output(loss);
    let mut store = GradStore::new();
    if tape.is_empty() {
        return Ok(store);
    }
    store
        .grads
        .insert(loss.id(), Tensor::ones(loss.shape()));
    for node in tape.nodes.iter().rev() {
        let Some(op) = node.op() else { continue };
        let Some(upstream) = store.grads.get(&node.id()).cloned() else {
            continue;
        };
        step_backward(node, op, &upstream, &mut store)?;
    }
    Ok(store)
}

fn step_backward<T: Scalar>(
    node: &Tensor<T>,
    op: &Op<T>,
    u: &Tensor<T>,
    store: &mut GradStore<T>,
) -> Result<()> {
    match op {
        Op::Add(a, b) => {
            if a.tracked() {
                store.accumulate(a, u.clone());
            }
            if b.tracked() {
                store.accumulate(b, u.clone());
            }
        }
        Op::Sub(a, b) => {
            if a.tracked() {
                store.accumulate(a, u.clone());
            }
            if b.tracked() {
                let data: Vec<T> = u.data().iter().map(|&v| -v).collect();
                store.accumulate(b, plain(data, u.shape().to_vec()));
            }
        }
        Op::Mul(a, b) => {
            if a.tracked() {
                let data: Vec<T> = u
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&g, &bv)| g * bv)
                    .collect();
                store.accumulate(a, plain(data, a.shape().to_vec()));
            }
            if b.tracked() {
                let data: Vec<T> = u
                    .data()
                    .iter()
                    .zip(a.data())
                    .map(|(&g, &av)| g * av)
                    .collect();
                store.accumulate(b, plain(data, b.shape().to_vec()));
            }
        }
        Op::AddScalar(a) => {
            store.accumulate(a, u.clone());
        }
        Op::MulScalar(a, c) => {
            let data: Vec<T> = u.data().iter().map(|&v| v * *c).collect();
            store.accumulate(a, plain(data, a.shape().to_vec()));
        }
        Op::Abs(a) => {
            let data: Vec<T> = u
                .data()
                .iter()
                .zip(a.data())
                .map(|(&g, &av)| {
                    if av > T::zero() {
                        g
                    } else if av < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })
                .collect();
            store.accumulate(a, plain(data, a.shape().to_vec()));
        }
        Op::Sqrt(a) => {
            let half = T::from_f64(0.5);
            let data: Vec<T> = u
                .data()
                .iter()
                .zip(node.data())
                .map(|(&g, &y)| if y == T::zero() { T::zero() } else { g * half / y })
                .collect();
            store.accumulate(a, plain(data, a.shape().to_vec()));
        }
        Op::Silu(a) => {
            let data: Vec<T> = u
                .data()
                .iter()
                .zip(a.data())
                .map(|(&g, &x)| g * kernels::silu_grad(x))
                .collect();
            store.accumulate(a, plain(data, a.shape().to_vec()));
        }
        Op::Gelu(a) => {
            let data: Vec<T> = u
                .data()
                .iter()
                .zip(a.data())
                .map(|(&g, &x)| g * kernels::gelu_grad(x))
                .collect();
            store.accumulate(a, plain(data, a.shape().to_vec()));
        }
        Op::Matmul { a, b, trans_b } => {
            let opn = if *trans_b { "matmul_nt" } else { "matmul" };
            let (batch, m, k, n) = mm_dims(opn, a, b, *trans_b)?;
            if a.tracked() {
                let mut da = vec![T::zero(); a.numel()];
                for bi in 0..batch {
                    let ub = &u.data()[bi * m * n..(bi + 1) * m * n];
                    let bb = &b.data()[bi * k * n..(bi + 1) * k * n];
                    let dab = &mut da[bi * m * k..(bi + 1) * m * k];
                    if *trans_b {
                        // dA = u @ B, B stored [n, k]
                        kernels::gemm_nn(ub, bb, dab, m, n, k);
                    } else {
                        // dA = u @ B^T, B stored [k, n]
                        kernels::gemm_nt(ub, bb, dab, m, n, k);
                    }
                }
                store.accumulate(a, plain(da, a.shape().to_vec()));
            }
            if b.tracked() {
                let mut db = vec![T::zero(); b.numel()];
                for bi in 0..batch {
                    let ub = &u.data()[bi * m * n..(bi + 1) * m * n];
                    let ab = &a.data()[bi * m * k..(bi + 1) * m * k];
                    let dbb = &mut db[bi * k * n..(bi + 1) * k * n];
                    if *trans_b {
                        // dB[n,k] = u^T @ A
                        kernels::gemm_tn(ub, ab, dbb, m, n, k);
                    } else {
                        // dB[k,n] = A^T @ u
                        kernels::gemm_tn(ab, ub, dbb, m, k, n);
                    }
                }
                store.accumulate(b, plain(db, b.shape().to_vec()));
            }
        }
        Op::Conv2d { x, w, stride, pad } => {
            let (bsz, c_in, h, width) = x.dims4("conv2d")?;
            let (c_out, _, kh, kw) = w.dims4("conv2d")?;
            let oh = kernels::conv_out_extent(h, kh, *stride, *pad);
            let ow = kernels::conv_out_extent(width, kw, *stride, *pad);
            let l = oh * ow;
            let ck = c_in * kh * kw;
            let mut dw = vec![T::zero(); w.numel()];
            let mut dx = vec![T::zero(); x.numel()];
            let mut cols = vec![T::zero(); ck * l];
            let mut dcols = vec![T::zero(); ck * l];
            for bi in 0..bsz {
                let ub = &u.data()[bi * c_out * l..(bi + 1) * c_out * l];
                if w.tracked() {
                    kernels::im2col(
                        &x.data()[bi * c_in * h * width..(bi + 1) * c_in * h * width],
                        c_in,
                        h,
                        width,
                        kh,
                        kw,
                        *stride,
                        *pad,
                        &mut cols,
                    );
                    kernels::gemm_nt(ub, &cols, &mut dw, c_out, l, ck);
                }
                if x.tracked() {
                    dcols.iter_mut().for_each(|v| *v = T::zero());
                    kernels::gemm_tn(w.data(), ub, &mut dcols, c_out, ck, l);
                    kernels::col2im(
                        &dcols,
                        c_in,
                        h,
                        width,
                        kh,
                        kw,
                        *stride,
                        *pad,
                        &mut dx[bi * c_in * h * width..(bi + 1) * c_in * h * width],
                    );
                }
            }
            if w.tracked() {
                store.accumulate(w, plain(dw, w.shape().to_vec()));
            }
            if x.tracked() {
                store.accumulate(x, plain(dx, x.shape().to_vec()));
            }
        }
        Op::AddChannelBias(x, b) => {
            let (bsz, c, h, w) = x.dims4("add_channel_bias")?;
            if x.tracked() {
                store.accumulate(x, u.clone());
            }
            if b.tracked() {
                let hw = h * w;
                let mut db = vec![T::zero(); c];
                for bi in 0..bsz {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for &g in &u.data()[base..base + hw] {
                            db[ci] = db[ci] + g;
                        }
                    }
                }
                store.accumulate(b, plain(db, vec![c]));
            }
        }
        Op::AddBatchChannelBias(x, b) => {
            let (bsz, c, h, w) = x.dims4("add_batch_channel_bias")?;
            if x.tracked() {
                store.accumulate(x, u.clone());
            }
            if b.tracked() {
                let hw = h * w;
                let mut db = vec![T::zero(); bsz * c];
                for bc in 0..bsz * c {
                    for &g in &u.data()[bc * hw..(bc + 1) * hw] {
                        db[bc] = db[bc] + g;
                    }
                }
                store.accumulate(b, plain(db, vec![bsz, c]));
            }
        }
        Op::AddRowBias(x, b) => {
            let (n, c) = x.dims2("add_row_bias")?;
            if x.tracked() {
                store.accumulate(x, u.clone());
            }
            if b.tracked() {
                let mut db = vec![T::zero(); c];
                for r in 0..n {
                    for ci in 0..c {
                        db[ci] = db[ci] + u.data()[r * c + ci];
                    }
                }
                store.accumulate(b, plain(db, vec![c]));
            }
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            xhat,
            inv_std,
            ..
        } => {
            let (bsz, c, h, w) = x.dims4("group_norm")?;
            let hw = h * w;
            let cg = c / groups;
            let m = cg * hw;
            let m_t = T::from_f64(m as f64);
            if gamma.tracked() {
                let mut dg = vec![T::zero(); c];
                for bi in 0..bsz {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for i in 0..hw {
                            dg[ci] = dg[ci] + u.data()[base + i] * xhat.data()[base + i];
                        }
                    }
                }
                store.accumulate(gamma, plain(dg, vec![c]));
            }
            if beta.tracked() {
                let mut db = vec![T::zero(); c];
                for bi in 0..bsz {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for i in 0..hw {
                            db[ci] = db[ci] + u.data()[base + i];
                        }
                    }
                }
                store.accumulate(beta, plain(db, vec![c]));
            }
            if x.tracked() {
                let mut dx = vec![T::zero(); x.numel()];
                let mut dxhat = vec![T::zero(); m];
                for bi in 0..bsz {
                    for g in 0..*groups {
                        let base = (bi * c + g * cg) * hw;
                        for i in 0..m {
                            let ci = g * cg + i / hw;
                            dxhat[i] = u.data()[base + i] * gamma.data()[ci];
                        }
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for i in 0..m {
                            s1 = s1 + dxhat[i];
                            s2 = s2 + dxhat[i] * xhat.data()[base + i];
                        }
                        s1 = s1 / m_t;
                        s2 = s2 / m_t;
                        let istd = inv_std.data()[bi * groups + g];
                        for i in 0..m {
                            dx[base + i] =
                                istd * (dxhat[i] - s1 - xhat.data()[base + i] * s2);
                        }
                    }
                }
                store.accumulate(x, plain(dx, x.shape().to_vec()));
            }
        }
        Op::SoftmaxLast(x) => {
            let n = *node.shape().last().expect("softmax output has a shape");
            let rows = node.numel() / n;
            let y = node.data();
            let mut dx = vec![T::zero(); node.numel()];
            for r in 0..rows {
                let y_row = &y[r * n..(r + 1) * n];
                let u_row = &u.data()[r * n..(r + 1) * n];
                let mut dot = T::zero();
                for i in 0..n {
                    dot = dot + u_row[i] * y_row[i];
                }
                let dst = &mut dx[r * n..(r + 1) * n];
                for i in 0..n {
                    dst[i] = y_row[i] * (u_row[i] - dot);
                }
            }
            store.accumulate(x, plain(dx, x.shape().to_vec()));
        }
        Op::MeanAll(x) => {
            let g = u.item() / T::from_f64(x.numel() as f64);
            store.accumulate(x, Tensor::full(x.shape(), g));
        }
        Op::SumAll(x) => {
            store.accumulate(x, Tensor::full(x.shape(), u.item()));
        }
        Op::Reshape(x) => {
            store.accumulate(x, plain(u.to_vec(), x.shape().to_vec()));
        }
        Op::ConcatChannels(a, b) => {
            let (bsz, ca, h, w) = a.dims4("concat_channels")?;
            let (_, cb, _, _) = b.dims4("concat_channels")?;
            let hw = h * w;
            let c = ca + cb;
            if a.tracked() {
                let mut da = vec![T::zero(); a.numel()];
                for bi in 0..bsz {
                    da[bi * ca * hw..(bi + 1) * ca * hw]
                        .copy_from_slice(&u.data()[bi * c * hw..bi * c * hw + ca * hw]);
                }
                store.accumulate(a, plain(da, a.shape().to_vec()));
            }
            if b.tracked() {
                let mut db = vec![T::zero(); b.numel()];
                for bi in 0..bsz {
                    db[bi * cb * hw..(bi + 1) * cb * hw].copy_from_slice(
                        &u.data()[bi * c * hw + ca * hw..(bi + 1) * c * hw],
                    );
                }
                store.accumulate(b, plain(db, b.shape().to_vec()));
            }
        }
        Op::ConcatRows(a, b) => {
            let (na, c) = a.dims2("concat_rows")?;
            let (nb, _) = b.dims2("concat_rows")?;
            if a.tracked() {
                store.accumulate(a, plain(u.data()[..na * c].to_vec(), a.shape().to_vec()));
            }
            if b.tracked() {
                store.accumulate(
                    b,
                    plain(u.data()[na * c..(na + nb) * c].to_vec(), b.shape().to_vec()),
                );
            }
        }
        Op::SliceRows { x, start } => {
            let (_, c) = x.dims2("slice_rows")?;
            let len = u.shape()[0];
            let mut dx = vec![T::zero(); x.numel()];
            dx[start * c..(start + len) * c].copy_from_slice(u.data());
            store.accumulate(x, plain(dx, x.shape().to_vec()));
        }
        Op::IndexSelectRows { x, idx } => {
            let (_, c) = x.dims2("index_select_rows")?;
            let mut dx = vec![T::zero(); x.numel()];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    dx[i * c + j] = dx[i * c + j] + u.data()[r * c + j];
                }
            }
            store.accumulate(x, plain(dx, x.shape().to_vec()));
        }
        Op::UpsampleNearest2x(x) => {
            let (bsz, c, h, w) = x.dims4("upsample_nearest_2x")?;
            let (oh, ow) = (2 * h, 2 * w);
            let mut dx = vec![T::zero(); x.numel()];
            for bc in 0..bsz * c {
                let src = &u.data()[bc * oh * ow..(bc + 1) * oh * ow];
                let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
                for y in 0..oh {
                    for xx in 0..ow {
                        let d = (y / 2) * w + xx / 2;
                        dst[d] = dst[d] + src[y * ow + xx];
                    }
                }
            }
            store.accumulate(x, plain(dx, x.shape().to_vec()));
        }
        Op::NchwToTokens(x) => {
            let (_, _, h, w) = x.dims4("nchw_to_tokens")?;
            let g = no_grad(|| u.tokens_to_nchw(h, w))?;
            store.accumulate(x, g);
        }
        Op::TokensToNchw(x) => {
            let g = no_grad(|| u.nchw_to_tokens())?;
            store.accumulate(x, g);
        }
        Op::SplitHeads { x, heads } => {
            let g = no_grad(|| u.merge_heads(*heads))?;
            store.accumulate(x, g);
        }
        Op::MergeHeads { x, heads } => {
            let g = no_grad(|| u.split_heads(*heads))?;
            store.accumulate(x, g);
        }
        Op::Fft2Re(x) => {
            store.accumulate(x, fft_grad::fft2_re_backward(u));
        }
        Op::Fft2Im(x) => {
            store.accumulate(x, fft_grad::fft2_im_backward(u));
        }
        Op::Ifft2Real { re, im } => {
            let (dre, dim) = fft_grad::ifft2_backward(u);
            if re.tracked() {
                store.accumulate(re, dre);
            }
            if im.tracked() {
                store.accumulate(im, dim);
            }
        }
    }
    Ok(())
}
