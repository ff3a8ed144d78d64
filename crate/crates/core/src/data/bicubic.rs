//! Bicubic resampling with the Matlab-imresize conventions: cubic
//! convolution kernel with a = -0.5, output-centered sample mapping,
//! kernel support widened by the reduction factor when antialiasing a
//! downscale, edges handled by clamping, weights normalized per tap set.

use latentsr_tensor::{Scalar, Tensor};

use crate::{Error, Result};

/// Catmull-Rom-family cubic kernel, a = -0.5.
fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= 1.0 {
        (1.5 * ax - 2.5) * ax * ax + 1.0
    } else if ax < 2.0 {
        ((-0.5 * ax + 2.5) * ax - 4.0) * ax + 2.0
    } else {
        0.0
    }
}

/// Tap indices (clamped) and normalized weights for one output axis.
fn axis_weights(in_len: usize, out_len: usize, antialias: bool) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    // Shrink the kernel bandwidth when reducing, per imresize.
    let kscale = if antialias && scale < 1.0 { scale } else { 1.0 };
    let support = 2.0 / kscale;
    let mut rows = Vec::with_capacity(out_len);
    for u in 0..out_len {
        let x = (u as f64 + 0.5) / scale - 0.5;
        let left = (x - support).ceil() as isize;
        let right = (x + support).floor() as isize;
        let mut taps: Vec<(usize, f64)> = Vec::new();
        let mut sum = 0.0;
        for i in left..=right {
            let w = kscale * cubic(kscale * (x - i as f64));
            if w != 0.0 {
                let idx = i.clamp(0, in_len as isize - 1) as usize;
                sum += w;
                taps.push((idx, w));
            }
        }
        debug_assert!(sum > 0.0);
        for t in &mut taps {
            t.1 /= sum;
        }
        rows.push(taps);
    }
    rows
}

/// Separable bicubic resize of a `[C,H,W]` or `[B,C,H,W]` tensor.
pub fn bicubic_resize<T: Scalar>(
    img: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    antialias: bool,
) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Data("bicubic_resize: zero-size output".into()));
    }
    let (planes, h, w, mut out_shape) = match img.shape() {
        [c, h, w] => (*c, *h, *w, vec![*c, out_h, out_w]),
        [b, c, h, w] => (*b * *c, *h, *w, vec![*b, *c, out_h, out_w]),
        s => {
            return Err(Error::Data(format!(
                "bicubic_resize expects [C,H,W] or [B,C,H,W], got {s:?}"
            )))
        }
    };
    if h == 0 || w == 0 {
        return Err(Error::Data("bicubic_resize: empty input".into()));
    }
    let row_taps = axis_weights(w, out_w, antialias);
    let col_taps = axis_weights(h, out_h, antialias);
    let mut out = vec![T::zero(); planes * out_h * out_w];
    let mut tmp = vec![0.0f64; h * out_w];
    for p in 0..planes {
        let src = &img.data()[p * h * w..(p + 1) * h * w];
        // Horizontal pass.
        for y in 0..h {
            for (ox, taps) in row_taps.iter().enumerate() {
                let mut acc = 0.0;
                for &(ix, wt) in taps {
                    acc += src[y * w + ix].to_f64() * wt;
                }
                tmp[y * out_w + ox] = acc;
            }
        }
        // Vertical pass.
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, taps) in col_taps.iter().enumerate() {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for &(iy, wt) in taps {
                    acc += tmp[iy * out_w + ox] * wt;
                }
                dst[oy * out_w + ox] = T::from_f64(acc);
            }
        }
    }
    let shape = std::mem::take(&mut out_shape);
    Ok(Tensor::from_vec(out, &shape).expect("consistent shape"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_resizes_to_same_constant() {
        let img = Tensor::<f32>::full(&[1, 6, 6], 0.42);
        for (h, w, aa) in [(12, 12, false), (3, 3, true), (5, 9, true)] {
            let out = bicubic_resize(&img, h, w, aa).unwrap();
            for &v in out.data() {
                assert!((v - 0.42).abs() < 1e-6, "{h}x{w} aa={aa}: {v}");
            }
        }
    }

    #[test]
    fn cubic_reproduces_linear_ramp_on_upscale() {
        // values v(x) = x along the row; away from the clamped border
        // every upscaled sample must sit exactly on the ramp.
        let w = 8;
        let data: Vec<f64> = (0..w).map(|x| x as f64).collect();
        let img = Tensor::from_vec(data, &[1, 1, w]).unwrap();
        let out = bicubic_resize(&img, 1, 2 * w, false).unwrap();
        let scale = 2.0;
        for u in 0..2 * w {
            let x = (u as f64 + 0.5) / scale - 0.5;
            if x < 2.0 || x > (w - 3) as f64 {
                continue; // kernel touches the clamped border
            }
            let got = out.data()[u];
            assert!((got - x).abs() < 1e-9, "u={u}: {got} vs {x}");
        }
    }

    #[test]
    fn same_size_resize_is_identity() {
        let data: Vec<f32> = (0..48).map(|v| (v as f32).sin()).collect();
        let img = Tensor::from_vec(data.clone(), &[3, 4, 4]).unwrap();
        let out = bicubic_resize(&img, 4, 4, true).unwrap();
        for (a, b) in out.data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn downscale_matches_dense_kernel_matrix_oracle() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let data: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let img = Tensor::from_vec(data.clone(), &[1, 8, 8]).unwrap();
        let out = bicubic_resize(&img, 4, 4, true).unwrap();

        // Oracle: materialize the full (out_h*out_w, in_h*in_w) matrix
        // as the tensor product of the axis tap sets and apply it.
        let rows = axis_weights(8, 4, true);
        let cols = axis_weights(8, 4, true);
        for oy in 0..4 {
            for ox in 0..4 {
                let mut acc = 0.0;
                for &(iy, wy) in &cols[oy] {
                    for &(ix, wx) in &rows[ox] {
                        acc += wy * wx * data[iy * 8 + ix];
                    }
                }
                let got = out.data()[oy * 4 + ox];
                assert!((got - acc).abs() < 1e-5, "({oy},{ox}): {got} vs {acc}");
            }
        }
    }

    #[test]
    fn zero_output_is_rejected() {
        let img = Tensor::<f32>::zeros(&[1, 4, 4]);
        assert!(bicubic_resize(&img, 0, 4, true).is_err());
    }

    #[test]
    fn antialias_widens_the_downscale_kernel() {
        let with = axis_weights(16, 4, true);
        let without = axis_weights(16, 4, false);
        assert!(with[1].len() > without[1].len());
    }
}
