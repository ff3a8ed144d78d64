//! Statistical and self-consistency oracles for the diffusion math.

use latentsr_core::schedule::{
    denoise_step, forward_noise, make_schedule, randn, NoiseSchedule,
};
use latentsr_tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BETA_START: f64 = 1.5e-4;
const BETA_END: f64 = 1.95e-2;

/// Empirical mean and std of (z_t - sqrt(a_hat)*y) over many draws.
fn noise_moments(
    s: &NoiseSchedule,
    y: &Tensor<f32>,
    t: usize,
    draws: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, f64, usize) {
    let signal = y
        .mul_scalar((s.alpha_hat(t).sqrt()) as f32)
        .unwrap();
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    let n = draws * y.numel();
    for _ in 0..draws {
        let eps = randn::<f32>(y.shape(), rng);
        let z = forward_noise(y, t, &eps, s).unwrap();
        for (zv, sv) in z.data().iter().zip(signal.data()) {
            let c = (*zv - *sv) as f64;
            sum += c;
            sum_sq += c * c;
        }
    }
    let mean = sum / n as f64;
    let var = sum_sq / n as f64 - mean * mean;
    (mean, var.sqrt(), n)
}

#[test]
fn marginal_matches_closed_form_within_three_sigma() {
    let s = make_schedule(1000, BETA_START, BETA_END).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let y = randn::<f32>(&[4, 4], &mut rng);
    for t in [10usize, 100, 500] {
        let sigma_true = (1.0 - s.alpha_hat(t)).sqrt();
        let (mean, std, n) = noise_moments(&s, &y, t, 10_000, &mut rng);
        // Mean of centered samples ~ N(0, sigma^2/n).
        let se_mean = sigma_true / (n as f64).sqrt();
        assert!(
            mean.abs() <= 3.0 * se_mean,
            "t={t}: centered mean {mean:.3e} off by more than 3 x {se_mean:.3e}"
        );
        // Std estimator SE ~ sigma / sqrt(2n).
        let se_std = sigma_true / (2.0 * n as f64).sqrt();
        assert!(
            (std - sigma_true).abs() <= 3.0 * se_std,
            "t={t}: std {std:.6} vs {sigma_true:.6} (3 SE = {:.2e})",
            3.0 * se_std
        );
    }
}

/// One-shot noising to t must match the single-step Markov chain in
/// distribution; first two moments at 3 sigma over 10k draws.
#[test]
fn composition_matches_markov_chain_moments() {
    let s = make_schedule(1000, BETA_START, BETA_END).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let y = Tensor::from_vec(vec![0.7f32], &[1]).unwrap();
    for t in [10usize, 100, 500] {
        let draws = 10_000;
        // Markov: z_k = sqrt(alpha_k) z_{k-1} + sqrt(1-alpha_k) eps_k.
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for _ in 0..draws {
            let mut z = 0.7f64;
            for k in 1..=t {
                let a = s.alpha(k);
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                z = a.sqrt() * z + (1.0 - a).sqrt() * e;
            }
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / draws as f64;
        let var = sum_sq / draws as f64 - mean * mean;
        let expect_mean = s.alpha_hat(t).sqrt() * 0.7;
        let sigma = (1.0 - s.alpha_hat(t)).sqrt();
        let se_mean = sigma / (draws as f64).sqrt();
        let se_std = sigma / (2.0 * draws as f64).sqrt();
        assert!(
            (mean - expect_mean).abs() <= 3.0 * se_mean,
            "t={t}: chain mean {mean:.4} vs {expect_mean:.4}"
        );
        assert!(
            (var.sqrt() - sigma).abs() <= 3.0 * se_std,
            "t={t}: chain std {:.4} vs {sigma:.4}",
            var.sqrt()
        );
    }
}

/// With a denoiser that reports the exact noise consistent with the
/// closed-form marginal, the T=20 reverse chain lands on the target.
#[test]
fn reverse_chain_with_oracle_denoiser_recovers_target() {
    let s = make_schedule(20, 1e-3, 5e-2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    let target = randn::<f32>(&[3, 4, 4], &mut rng);

    // Start from pure noise as the reverse process specifies.
    let mut y = randn::<f32>(&[3, 4, 4], &mut rng);
    for t in (1..=20).rev() {
        let hat = s.alpha_hat(t);
        // Oracle: the epsilon that explains y_t given the known target.
        let eps_data: Vec<f32> = y
            .data()
            .iter()
            .zip(target.data())
            .map(|(&yt, &y0)| {
                ((yt as f64 - hat.sqrt() * y0 as f64) / (1.0 - hat).sqrt()) as f32
            })
            .collect();
        let eps_pred = Tensor::from_vec(eps_data, y.shape()).unwrap();
        y = denoise_step(&y, &eps_pred, t, &s, &mut rng).unwrap();
    }
    let max_err = y
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(max_err < 1e-3, "max abs error {max_err}");
}
