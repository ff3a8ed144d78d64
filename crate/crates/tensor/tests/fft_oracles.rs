//! FFT correctness against closed-form spectra and a brute-force DFT.

use latentsr_tensor::{Tensor, TensorError};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// O(N^2) reference DFT of one real plane.
fn naive_dft(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc_re = 0.0;
            let mut acc_im = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    let ang = -2.0 * std::f64::consts::PI
                        * (u as f64 * y as f64 / h as f64 + v as f64 * xx as f64 / w as f64);
                    acc_re += x[y * w + xx] * ang.cos();
                    acc_im += x[y * w + xx] * ang.sin();
                }
            }
            re[u * w + v] = acc_re;
            im[u * w + v] = acc_im;
        }
    }
    (re, im)
}

#[test]
fn constant_image_is_dc_only() {
    let c = 0.73f64;
    let x = Tensor::full(&[8, 8], c);
    let f = x.fft2().unwrap();
    assert!((f.re.data()[0] - 64.0 * c).abs() < 1e-10);
    for (i, (&r, &im)) in f.re.data().iter().zip(f.im.data()).enumerate() {
        if i == 0 {
            continue;
        }
        assert!(r.abs() < 1e-10 && im.abs() < 1e-10, "bin {i} not zero");
    }
}

#[test]
fn impulse_has_flat_unit_spectrum() {
    let mut data = vec![0.0f64; 64];
    data[0] = 1.0;
    let x = Tensor::from_vec(data, &[8, 8]).unwrap();
    let f = x.fft2().unwrap();
    for (&r, &im) in f.re.data().iter().zip(f.im.data()) {
        assert!((r - 1.0).abs() < 1e-12);
        assert!(im.abs() < 1e-12);
    }
}

#[test]
fn matches_naive_dft_on_random_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..5 {
        let data: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (re_ref, im_ref) = naive_dft(&data, 8, 8);
        let f = Tensor::from_vec(data, &[8, 8]).unwrap().fft2().unwrap();
        let scale = re_ref
            .iter()
            .chain(&im_ref)
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        for i in 0..64 {
            assert!((f.re.data()[i] - re_ref[i]).abs() < 1e-5 * scale);
            assert!((f.im.data()[i] - im_ref[i]).abs() < 1e-5 * scale);
        }
    }
}

#[test]
fn non_power_of_two_extent_is_rejected() {
    let x = Tensor::<f32>::zeros(&[6, 6]);
    match x.fft2() {
        Err(TensorError::NonPowerOfTwo { extent: 6, .. }) => {}
        other => panic!("expected NonPowerOfTwo, got {other:?}"),
    }
}

#[test]
fn batched_transform_handles_leading_dims() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data: Vec<f32> = (0..2 * 3 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = Tensor::from_vec(data.clone(), &[2, 3, 8, 8]).unwrap();
    let back = Tensor::ifft2_real(&x.fft2().unwrap()).unwrap();
    let max = data.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    for (a, b) in back.data().iter().zip(&data) {
        assert!((a - b).abs() < 1e-5 * max);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Round trip at every power-of-two size up to 64, f32 as trained.
    #[test]
    fn roundtrip_recovers_input(seed in 0u64..1000, size_idx in 0usize..6) {
        let n = [2usize, 4, 8, 16, 32, 64][size_idx];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let x = Tensor::from_vec(data.clone(), &[n, n]).unwrap();
        let back = Tensor::ifft2_real(&x.fft2().unwrap()).unwrap();
        let max = data.iter().fold(0.0f32, |m, &v| m.max(v.abs())).max(1e-6);
        for (a, b) in back.data().iter().zip(&data) {
            prop_assert!((a - b).abs() < 1e-5 * max);
        }
    }

    /// Parseval: sum(x^2) == sum(|F|^2) / (H*W) within 1e-4 relative.
    #[test]
    fn parseval_energy_identity(seed in 0u64..1000, size_idx in 0usize..4) {
        let n = [4usize, 8, 16, 32][size_idx];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let spatial: f64 = data.iter().map(|&v| (v as f64) * (v as f64)).sum();
        let f = Tensor::from_vec(data, &[n, n]).unwrap().fft2().unwrap();
        let spectral = f.power_sum() / (n * n) as f64;
        prop_assert!((spatial - spectral).abs() <= 1e-4 * spatial.abs().max(1e-9));
    }
}
