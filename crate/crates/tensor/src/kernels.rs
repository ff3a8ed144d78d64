//! Raw compute kernels shared by forward ops and backward passes.
//!
//! All loops have a fixed iteration order; nothing here is allowed to
//! parallelize, so results are bit-for-bit reproducible.

use crate::Scalar;

/// c[m,n] += a[m,k] * b[k,n]
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            crow[j] = crow[j] + acc;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for p in 0..m {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let av = a[p * k + i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold one image [C,H,W] into columns [C*kh*kw, out_h*out_w].
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    let l = oh * ow;
    debug_assert_eq!(cols.len(), c * kh * kw * l);
    for col_ch in 0..c * kh * kw {
        let ci = col_ch / (kh * kw);
        let rest = col_ch % (kh * kw);
        let ki = rest / kw;
        let kj = rest % kw;
        let dst = &mut cols[col_ch * l..(col_ch + 1) * l];
        for oy in 0..oh {
            let iy = (oy * stride + ki) as isize - pad as isize;
            for ox in 0..ow {
                let ix = (ox * stride + kj) as isize - pad as isize;
                dst[oy * ow + ox] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                    x[ci * h * w + iy as usize * w + ix as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
}

/// Fold columns back into an image, accumulating overlapping windows.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &mut [T],
) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    let l = oh * ow;
    debug_assert_eq!(cols.len(), c * kh * kw * l);
    debug_assert_eq!(x.len(), c * h * w);
    for col_ch in 0..c * kh * kw {
        let ci = col_ch / (kh * kw);
        let rest = col_ch % (kh * kw);
        let ki = rest / kw;
        let kj = rest % kw;
        let src = &cols[col_ch * l..(col_ch + 1) * l];
        for oy in 0..oh {
            let iy = (oy * stride + ki) as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for ox in 0..ow {
                let ix = (ox * stride + kj) as isize - pad as isize;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                let dst = ci * h * w + iy as usize * w + ix as usize;
                x[dst] = x[dst] + src[oy * ow + ox];
            }
        }
    }
}

pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let k = T::from_f64(GELU_K);
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let inner = k * (x + c * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::from_f64(GELU_K);
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let dinner = k * (T::one() + three * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}
