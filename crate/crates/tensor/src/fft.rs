//! Radix-2 2-D FFT over the last two dimensions.
//!
//! Extents must be powers of two; the frequency paths in this workspace
//! run on 8-64 px latents, so general-length transforms are out of scope.
//! `fft2` and `ifft2_real` are recorded ops: the DFT is linear, so each
//! backward pass is itself one transform of the upstream gradient.

use crate::tensor::Op;
use crate::{check_finite, Result, Scalar, Tensor, TensorError};

fn check_pow2(op: &'static str, n: usize) -> Result<()> {
    if n < 2 || !n.is_power_of_two() {
        return Err(TensorError::NonPowerOfTwo { op, extent: n });
    }
    Ok(())
}

/// In-place iterative Cooley-Tukey on one complex row of length `n`.
fn fft_1d<T: Scalar>(re: &mut [T], im: &mut [T], n: usize, inverse: bool) {
    debug_assert!(n.is_power_of_two());
    // Bit-reversal permutation.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let (w_re, w_im) = (T::from_f64(ang.cos()), T::from_f64(ang.sin()));
        let mut start = 0;
        while start < n {
            let mut cur_re = T::one();
            let mut cur_im = T::zero();
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let t_re = cur_re * re[b] - cur_im * im[b];
                let t_im = cur_re * im[b] + cur_im * re[b];
                re[b] = re[a] - t_re;
                im[b] = im[a] - t_im;
                re[a] = re[a] + t_re;
                im[a] = im[a] + t_im;
                let next_re = cur_re * w_re - cur_im * w_im;
                cur_im = cur_re * w_im + cur_im * w_re;
                cur_re = next_re;
            }
            start += len;
        }
        len *= 2;
    }
}

/// Unnormalized 2-D transform of one `h`x`w` plane, in place.
pub fn fft2_plane<T: Scalar>(re: &mut [T], im: &mut [T], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(re.len(), h * w);
    for row in 0..h {
        fft_1d(&mut re[row * w..(row + 1) * w], &mut im[row * w..(row + 1) * w], w, inverse);
    }
    let mut col_re = vec![T::zero(); h];
    let mut col_im = vec![T::zero(); h];
    for col in 0..w {
        for row in 0..h {
            col_re[row] = re[row * w + col];
            col_im[row] = im[row * w + col];
        }
        fft_1d(&mut col_re, &mut col_im, h, inverse);
        for row in 0..h {
            re[row * w + col] = col_re[row];
            im[row * w + col] = col_im[row];
        }
    }
}

/// Applies the unnormalized transform plane-by-plane over leading dims.
fn fft2_batched<T: Scalar>(re: &mut [T], im: &mut [T], h: usize, w: usize, inverse: bool) {
    let plane = h * w;
    let batches = re.len() / plane;
    for b in 0..batches {
        fft2_plane(
            &mut re[b * plane..(b + 1) * plane],
            &mut im[b * plane..(b + 1) * plane],
            h,
            w,
            inverse,
        );
    }
}

fn last_two(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::BadShape {
            op: "fft2",
            shape: shape.to_vec(),
            reason: "expected at least 2 dimensions".into(),
        });
    }
    Ok((shape[shape.len() - 2], shape[shape.len() - 1]))
}

/// Real and imaginary planes of equal shape.
#[derive(Clone, Debug)]
pub struct ComplexTensor<T: Scalar = f32> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
}

impl<T: Scalar> ComplexTensor<T> {
    pub fn new(re: Tensor<T>, im: Tensor<T>) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "complex",
                lhs: re.shape().to_vec(),
                rhs: im.shape().to_vec(),
            });
        }
        Ok(ComplexTensor { re, im })
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    /// Elementwise complex product, composed from recorded primitives.
    pub fn mul(&self, other: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let re = self.re.mul(&other.re)?.sub(&self.im.mul(&other.im)?)?;
        let im = self.re.mul(&other.im)?.add(&self.im.mul(&other.re)?)?;
        Ok(ComplexTensor { re, im })
    }

    /// |z| per element. The gradient is guarded at zero magnitude.
    pub fn magnitude(&self) -> Result<Tensor<T>> {
        self.re
            .mul(&self.re)?
            .add(&self.im.mul(&self.im)?)?
            .sqrt()
    }

    /// sum |z|^2 computed directly on the data (no recording).
    pub fn power_sum(&self) -> f64 {
        self.re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(&r, &i)| (r * r + i * i).to_f64())
            .sum()
    }
}

impl<T: Scalar> Tensor<T> {
    /// Forward 2-D DFT over the last two dimensions (unnormalized).
    pub fn fft2(&self) -> Result<ComplexTensor<T>> {
        let (h, w) = last_two(self.shape())?;
        check_pow2("fft2", h)?;
        check_pow2("fft2", w)?;
        let mut re = self.to_vec();
        let mut im = vec![T::zero(); self.numel()];
        fft2_batched(&mut re, &mut im, h, w, false);
        check_finite("fft2", &re)?;
        check_finite("fft2", &im)?;
        let rec_re = self.tracked().then(|| Op::Fft2Re(self.clone()));
        let rec_im = self.tracked().then(|| Op::Fft2Im(self.clone()));
        Ok(ComplexTensor {
            re: Tensor::make(re, self.shape().to_vec(), rec_re, false),
            im: Tensor::make(im, self.shape().to_vec(), rec_im, false),
        })
    }

    /// Inverse 2-D DFT returning the real component.
    ///
    /// Exactly inverts `fft2` on its output; on a Hermitian-symmetric
    /// spectrum the discarded imaginary component is rounding noise.
    pub fn ifft2_real(spectrum: &ComplexTensor<T>) -> Result<Tensor<T>> {
        let (h, w) = last_two(spectrum.shape())?;
        check_pow2("ifft2", h)?;
        check_pow2("ifft2", w)?;
        let mut re = spectrum.re.to_vec();
        let mut im = spectrum.im.to_vec();
        fft2_batched(&mut re, &mut im, h, w, true);
        let norm = T::from_f64(1.0 / (h * w) as f64);
        for v in &mut re {
            *v = *v * norm;
        }
        check_finite("ifft2", &re)?;
        let rec = (spectrum.re.tracked() || spectrum.im.tracked()).then(|| Op::Ifft2Real {
            re: spectrum.re.clone(),
            im: spectrum.im.clone(),
        });
        Ok(Tensor::make(re, spectrum.shape().to_vec(), rec, false))
    }
}

/// Backward kernels for the FFT ops; called from `backprop`.
pub(crate) mod grad {
    use super::*;

    /// d/dx of Re(fft2(x)) given upstream u: Re of the unnormalized
    /// inverse transform of u.
    pub(crate) fn fft2_re_backward<T: Scalar>(u: &Tensor<T>) -> Tensor<T> {
        let (h, w) = last_two(u.shape()).expect("validated in forward");
        let mut re = u.to_vec();
        let mut im = vec![T::zero(); u.numel()];
        fft2_batched(&mut re, &mut im, h, w, true);
        Tensor::make(re, u.shape().to_vec(), None, false)
    }

    /// d/dx of Im(fft2(x)) given upstream u: -Im of the unnormalized
    /// inverse transform of u.
    pub(crate) fn fft2_im_backward<T: Scalar>(u: &Tensor<T>) -> Tensor<T> {
        let (h, w) = last_two(u.shape()).expect("validated in forward");
        let mut re = u.to_vec();
        let mut im = vec![T::zero(); u.numel()];
        fft2_batched(&mut re, &mut im, h, w, true);
        for v in &mut im {
            *v = -*v;
        }
        Tensor::make(im, u.shape().to_vec(), None, false)
    }

    /// d/d(re,im) of ifft2_real given upstream u: forward transform of u
    /// scaled by 1/(HW); the imaginary half picks up the +Im component.
    pub(crate) fn ifft2_backward<T: Scalar>(u: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let (h, w) = last_two(u.shape()).expect("validated in forward");
        let mut re = u.to_vec();
        let mut im = vec![T::zero(); u.numel()];
        fft2_batched(&mut re, &mut im, h, w, false);
        let norm = T::from_f64(1.0 / (h * w) as f64);
        for v in &mut re {
            *v = *v * norm;
        }
        for v in &mut im {
            *v = *v * norm;
        }
        (
            Tensor::make(re, u.shape().to_vec(), None, false),
            Tensor::make(im, u.shape().to_vec(), None, false),
        )
    }
}
