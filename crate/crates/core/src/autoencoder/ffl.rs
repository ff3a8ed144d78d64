//! Frequency-domain reconstruction loss: spectrum-weighted squared
//! distance between the transforms of reference and reconstruction,
//! `(1/MN) sum_{u,v} w(u,v) |F_r(u,v) - F_f(u,v)|^2`, averaged over
//! channels and batch.

use latentsr_tensor::{no_grad, Scalar, Tensor};

use crate::{Error, Result};

/// Weight/exponent pair for the loss term.
#[derive(Debug, Clone, Copy)]
pub struct FreqLossConfig {
    /// Weight of the term in the total stage-2 loss.
    pub lambda: f64,
    /// Spectrum-weight exponent; 0 gives uniform weighting.
    pub alpha: f64,
}

impl Default for FreqLossConfig {
    fn default() -> Self {
        FreqLossConfig {
            lambda: 10.0,
            alpha: 1.0,
        }
    }
}

impl FreqLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "ffl_lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// The dynamic spectrum weight `w = |dF|^alpha`, normalized to max 1
/// per (image, channel) plane and treated as a constant (no gradient
/// flows through it).
fn spectrum_weight<T: Scalar>(
    d_re: &Tensor<T>,
    d_im: &Tensor<T>,
    alpha: f64,
    plane: usize,
) -> Tensor<T> {
    let n = d_re.numel();
    if alpha == 0.0 {
        return Tensor::ones(d_re.shape());
    }
    let mut w = vec![0.0f64; n];
    for i in 0..n {
        let re = d_re.data()[i].to_f64();
        let im = d_im.data()[i].to_f64();
        let mag = (re * re + im * im).sqrt();
        w[i] = mag.powf(alpha);
    }
    for chunk in w.chunks_mut(plane) {
        let max = chunk.iter().cloned().fold(0.0f64, f64::max);
        if max > 0.0 {
            for v in chunk {
                *v /= max;
            }
        }
    }
    Tensor::from_vec(w.into_iter().map(T::from_f64).collect(), d_re.shape())
        .expect("consistent shape")
}

/// Differentiable w.r.t. `fake`; `real` is treated as reference data.
pub fn focal_frequency_loss<T: Scalar>(
    real: &Tensor<T>,
    fake: &Tensor<T>,
    alpha: f64,
) -> Result<Tensor<T>> {
    if real.shape() != fake.shape() {
        return Err(Error::Model(format!(
            "focal_frequency_loss: shape {:?} != {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let (h, w) = match real.shape() {
        [.., h, w] if real.shape().len() >= 2 => (*h, *w),
        s => return Err(Error::Model(format!("need at least 2 dims, got {s:?}"))),
    };
    let f_real = no_grad(|| real.fft2())?;
    let f_fake = fake.fft2()?;
    let d_re = f_real.re.sub(&f_fake.re)?;
    let d_im = f_real.im.sub(&f_fake.im)?;
    let weight = no_grad(|| spectrum_weight(&d_re, &d_im, alpha, h * w));
    let sq = d_re.mul(&d_re)?.add(&d_im.mul(&d_im)?)?;
    Ok(sq.mul(&weight)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_images_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = crate::schedule::randn::<f32>(&[1, 3, 8, 8], &mut rng);
        let loss = focal_frequency_loss(&x, &x, 1.0).unwrap().item();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn positive_for_distinct_images_and_symmetric_at_alpha_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = crate::schedule::randn::<f64>(&[1, 1, 8, 8], &mut rng);
        let b = crate::schedule::randn::<f64>(&[1, 1, 8, 8], &mut rng);
        let ab = focal_frequency_loss(&a, &b, 0.0).unwrap().item();
        let ba = focal_frequency_loss(&b, &a, 0.0).unwrap().item();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-12 * ab.abs());
    }

    #[test]
    fn alpha_zero_matches_brute_force_dft() {
        // Uniform weighting against the O(N^4) double-sum DFT, single
        // impulse difference and random images.
        let mut impulse = vec![0.0f64; 64];
        impulse[9] = 1.0;
        let a = Tensor::from_vec(impulse, &[1, 1, 8, 8]).unwrap();
        let b = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
        let loss = focal_frequency_loss(&a, &b, 0.0).unwrap().item();
        // |F of unit impulse|^2 = 1 at every bin: (1/64) * sum = 64/64.
        assert!((loss - 1.0).abs() < 1e-9, "impulse loss {loss}");

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..3 {
            let a_data: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b_data: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut brute = 0.0;
            for u in 0..8 {
                for v in 0..8 {
                    let mut dre = 0.0;
                    let mut dim = 0.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            let ang = -2.0 * std::f64::consts::PI
                                * (u as f64 * y as f64 / 8.0 + v as f64 * x as f64 / 8.0);
                            let d = a_data[y * 8 + x] - b_data[y * 8 + x];
                            dre += d * ang.cos();
                            dim += d * ang.sin();
                        }
                    }
                    brute += dre * dre + dim * dim;
                }
            }
            brute /= 64.0;
            let a = Tensor::from_vec(a_data, &[1, 1, 8, 8]).unwrap();
            let b = Tensor::from_vec(b_data, &[1, 1, 8, 8]).unwrap();
            let got = focal_frequency_loss(&a, &b, 0.0).unwrap().item();
            assert!(
                (got - brute).abs() <= 1e-5 * brute.abs(),
                "{got} vs brute {brute}"
            );
        }
    }

    #[test]
    fn weight_is_normalized_and_gradient_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let real = crate::schedule::randn::<f32>(&[1, 2, 8, 8], &mut rng);
        let fake_leaf = crate::schedule::randn::<f32>(&[1, 2, 8, 8], &mut rng).detach_var();
        let loss = focal_frequency_loss(&real, &fake_leaf, 1.0).unwrap();
        let grads = latentsr_tensor::backward(&loss).unwrap();
        assert!(grads.get(&fake_leaf).is_some());
        // Finite-difference sanity on one coordinate with the weight
        // frozen at its analytic value would need w to be constant;
        // instead check the loss only decreases when moving toward the
        // reference along the gradient.
        let g = grads.get(&fake_leaf).unwrap().to_vec();
        let step = 1e-3f32;
        let moved: Vec<f32> = fake_leaf
            .data()
            .iter()
            .zip(&g)
            .map(|(&v, &gv)| v - step * gv)
            .collect();
        let moved = Tensor::from_vec(moved, fake_leaf.shape()).unwrap();
        let after = focal_frequency_loss(&real, &moved, 1.0).unwrap().item();
        assert!(after < loss.item(), "gradient must be a descent direction");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Tensor::<f32>::zeros(&[1, 1, 8, 8]);
        let b = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        assert!(focal_frequency_loss(&a, &b, 1.0).is_err());
    }
}
