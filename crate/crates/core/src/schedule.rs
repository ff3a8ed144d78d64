//! Closed-form diffusion math: the noising schedule, forward noising,
//! the epsilon training loss, the reverse sampling step, and the
//! timestep-to-stage-expert map.

use latentsr_tensor::{mse, Scalar, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Per-timestep coefficients `alpha[t]` and their running product
/// `alpha_hat[t]`, for t = 1..=T.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_hat: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps(), "timestep {t} out of range");
        self.alpha[t - 1]
    }

    /// Product of alphas up to and including `t`; `alpha_hat(0)` is 1.
    pub fn alpha_hat(&self, t: usize) -> f64 {
        assert!(t <= self.steps(), "timestep {t} out of range");
        if t == 0 {
            1.0
        } else {
            self.alpha_hat[t - 1]
        }
    }

    /// Uniformly subsample to `steps` timesteps, re-deriving the
    /// per-step alphas from ratios of the retained alpha_hat values.
    pub fn subsample(&self, steps: usize) -> Result<SubSchedule> {
        let t_max = self.steps();
        if steps == 0 || steps > t_max {
            return Err(Error::Schedule(format!(
                "cannot subsample {t_max}-step schedule to {steps} steps"
            )));
        }
        let mut taus = Vec::with_capacity(steps);
        for i in 1..=steps {
            // Evenly spaced, always ending at t_max.
            taus.push(i * t_max / steps);
        }
        let mut alpha = Vec::with_capacity(steps);
        let mut alpha_hat = Vec::with_capacity(steps);
        let mut prev_hat = 1.0;
        for &tau in &taus {
            let hat = self.alpha_hat(tau);
            alpha.push(hat / prev_hat);
            alpha_hat.push(hat);
            prev_hat = hat;
        }
        Ok(SubSchedule {
            taus,
            alpha,
            alpha_hat,
        })
    }
}

/// A step-reduced view of a schedule: the retained original timesteps
/// (used for conditioning the denoiser) and the re-derived coefficients.
#[derive(Debug, Clone)]
pub struct SubSchedule {
    /// Original timesteps, ascending; the chain visits them in reverse.
    pub taus: Vec<usize>,
    pub alpha: Vec<f64>,
    pub alpha_hat: Vec<f64>,
}

impl SubSchedule {
    pub fn steps(&self) -> usize {
        self.taus.len()
    }
}

/// Linear-beta schedule; `alpha[t] = 1 - beta[t]`.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::Schedule("schedule needs at least one step".into()));
    }
    if !(beta_start >= 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Schedule(format!(
            "invalid beta range [{beta_start}, {beta_end}]; need 0 <= start <= end < 1"
        )));
    }
    let mut alpha = Vec::with_capacity(t_max);
    let mut alpha_hat = Vec::with_capacity(t_max);
    let mut hat = 1.0;
    for i in 0..t_max {
        let frac = if t_max == 1 {
            0.0
        } else {
            i as f64 / (t_max - 1) as f64
        };
        let beta = beta_start + (beta_end - beta_start) * frac;
        let a = 1.0 - beta;
        hat *= a;
        alpha.push(a);
        alpha_hat.push(hat);
    }
    Ok(NoiseSchedule { alpha, alpha_hat })
}

/// Gaussian tensor with independent N(0,1) entries.
pub fn randn<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::from_vec(data, shape).expect("shape/product consistent")
}

/// One-shot noising to step `t`: `sqrt(a_hat)*y + sqrt(1-a_hat)*eps`.
pub fn forward_noise<T: Scalar>(
    y: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if y.shape() != eps.shape() {
        return Err(Error::Schedule(format!(
            "forward_noise: y shape {:?} != eps shape {:?}",
            y.shape(),
            eps.shape()
        )));
    }
    let hat = s.alpha_hat(t);
    let signal = y.mul_scalar(T::from_f64(hat.sqrt()))?;
    let noise = eps.mul_scalar(T::from_f64((1.0 - hat).sqrt()))?;
    Ok(signal.add(&noise)?)
}

/// Epsilon-prediction training loss: mean squared error.
pub fn eps_loss<T: Scalar>(eps: &Tensor<T>, eps_pred: &Tensor<T>) -> Result<Tensor<T>> {
    if eps.shape() != eps_pred.shape() {
        return Err(Error::Schedule(format!(
            "eps_loss: shape {:?} != {:?}",
            eps.shape(),
            eps_pred.shape()
        )));
    }
    Ok(mse(eps, eps_pred)?)
}

/// Shared body of the reverse update for a given (alpha, alpha_hat).
pub fn denoise_step_with<T: Scalar>(
    y_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    alpha: f64,
    alpha_hat: f64,
    noise: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if y_t.shape() != eps_pred.shape() {
        return Err(Error::Schedule(format!(
            "denoise_step: y shape {:?} != eps_pred shape {:?}",
            y_t.shape(),
            eps_pred.shape()
        )));
    }
    let eps_coeff = 1.0 - alpha;
    let mut y = if eps_coeff == 0.0 {
        // Degenerate step: both the correction and noise terms vanish.
        y_t.clone()
    } else {
        if alpha_hat >= 1.0 {
            return Err(Error::Schedule(
                "denoise_step: alpha_hat == 1 with a nonzero correction term (schedule misuse)"
                    .into(),
            ));
        }
        let scale = eps_coeff / (1.0 - alpha_hat).sqrt();
        let corrected = y_t.sub(&eps_pred.mul_scalar(T::from_f64(scale))?)?;
        corrected.mul_scalar(T::from_f64(1.0 / alpha.sqrt()))?
    };
    if let Some(n) = noise {
        let sigma = (1.0 - alpha).sqrt();
        if sigma > 0.0 {
            y = y.add(&n.mul_scalar(T::from_f64(sigma))?)?;
        }
    }
    Ok(y)
}

/// One reverse-diffusion update from `y_t` to `y_{t-1}`.
///
/// Fresh Gaussian noise is injected except at the final step t = 1.
pub fn denoise_step<T: Scalar>(
    y_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    if t < 1 || t > s.steps() {
        return Err(Error::Schedule(format!(
            "denoise_step: timestep {t} out of 1..={}",
            s.steps()
        )));
    }
    let noise = if t > 1 {
        Some(randn::<T>(y_t.shape(), rng))
    } else {
        None
    };
    denoise_step_with(y_t, eps_pred, s.alpha(t), s.alpha_hat(t), noise.as_ref())
}

/// Uniform partition of 1..=T into `num_stages` contiguous blocks,
/// highest-noise block first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagePartition {
    num_stages: usize,
    t_max: usize,
}

impl StagePartition {
    pub fn new(t_max: usize, num_stages: usize) -> Result<Self> {
        if num_stages == 0 || t_max == 0 || t_max % num_stages != 0 {
            return Err(Error::Schedule(format!(
                "{t_max} timesteps cannot split uniformly into {num_stages} stages"
            )));
        }
        Ok(StagePartition { num_stages, t_max })
    }

    pub fn num_stages(&self) -> usize {
        self.num_stages
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// Half-open intervals (lo, hi], highest-noise first.
    pub fn boundaries(&self) -> Vec<(usize, usize)> {
        let width = self.t_max / self.num_stages;
        (0..self.num_stages)
            .map(|i| (self.t_max - (i + 1) * width, self.t_max - i * width))
            .collect()
    }
}

/// Index of the stage expert that owns timestep `t`.
pub fn stage_of(t: usize, p: &StagePartition) -> Result<usize> {
    if t < 1 || t > p.t_max {
        return Err(Error::Schedule(format!(
            "stage_of: timestep {t} out of 1..={}",
            p.t_max
        )));
    }
    let width = p.t_max / p.num_stages;
    Ok(p.num_stages - 1 - (t - 1) / width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Defaults used across the workspace (documented in the config).
    pub(crate) const BETA_START: f64 = 1.5e-4;
    pub(crate) const BETA_END: f64 = 1.95e-2;

    #[test]
    fn default_schedule_drives_signal_to_noise() {
        let s = make_schedule(1000, BETA_START, BETA_END).unwrap();
        assert!(s.alpha_hat(1000) < 1e-2, "alpha_hat(T) = {}", s.alpha_hat(1000));
    }

    #[test]
    fn zero_beta_keeps_alpha_hat_at_one() {
        let s = make_schedule(10, 0.0, 0.0).unwrap();
        for t in 1..=10 {
            assert_eq!(s.alpha_hat(t), 1.0);
        }
    }

    #[test]
    fn single_step_product_is_alpha() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_hat(1), s.alpha(1));
    }

    #[test]
    fn alpha_hat_is_running_product_and_strictly_decreasing() {
        let s = make_schedule(100, BETA_START, BETA_END).unwrap();
        for t in 2..=100 {
            let expect = s.alpha_hat(t - 1) * s.alpha(t);
            assert_eq!(s.alpha_hat(t), expect, "exact product at t={t}");
            assert!(s.alpha_hat(t) < s.alpha_hat(t - 1));
        }
    }

    #[test]
    fn invalid_beta_range_is_rejected() {
        assert!(make_schedule(10, 0.5, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        assert!(make_schedule(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn forward_noise_zero_noise_coefficient() {
        let s = make_schedule(5, 0.0, 0.0).unwrap();
        let y = Tensor::<f32>::full(&[4], 0.3);
        let eps = Tensor::<f32>::full(&[4], 9.9);
        let z = forward_noise(&y, 3, &eps, &s).unwrap();
        assert_eq!(z.to_vec(), y.to_vec());
    }

    #[test]
    fn forward_noise_forced_arithmetic() {
        // alpha_hat = 0.25 via a single step with beta = 0.75
        let s = make_schedule(1, 0.75, 0.75).unwrap();
        let y = Tensor::<f64>::ones(&[8]);
        let eps = Tensor::<f64>::ones(&[8]);
        let z = forward_noise(&y, 1, &eps, &s).unwrap();
        let expect = 0.5 + 0.75f64.sqrt();
        for &v in z.data() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn eps_loss_trivial_values() {
        let a = Tensor::<f32>::full(&[3], 0.4);
        assert_eq!(eps_loss(&a, &a).unwrap().item(), 0.0);
        let one = Tensor::<f32>::scalar(1.0);
        let zero = Tensor::<f32>::scalar(0.0);
        assert_eq!(eps_loss(&one, &zero).unwrap().item(), 1.0);
    }

    #[test]
    fn denoise_step_degenerate_alpha_one() {
        let s = make_schedule(3, 0.0, 0.0).unwrap();
        let y = Tensor::<f32>::full(&[4], 1.7);
        let eps = Tensor::<f32>::full(&[4], 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = denoise_step(&y, &eps, 2, &s, &mut rng).unwrap();
        assert_eq!(out.to_vec(), y.to_vec());
    }

    #[test]
    fn denoise_step_forced_arithmetic() {
        // alpha = 0.99, alpha_hat = 0.5, eps_pred = 0, noise suppressed (t=1).
        let y = Tensor::<f64>::ones(&[4]);
        let eps = Tensor::<f64>::zeros(&[4]);
        let out = denoise_step_with(&y, &eps, 0.99, 0.5, None).unwrap();
        let expect = 1.0 / 0.99f64.sqrt();
        for &v in out.data() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn denoise_step_guards_alpha_hat_one() {
        let y = Tensor::<f32>::ones(&[2]);
        let eps = Tensor::<f32>::ones(&[2]);
        assert!(denoise_step_with(&y, &eps, 0.9, 1.0, None).is_err());
    }

    #[test]
    fn stage_of_matches_quarter_split() {
        let p = StagePartition::new(1000, 4).unwrap();
        assert_eq!(
            p.boundaries(),
            vec![(750, 1000), (500, 750), (250, 500), (0, 250)]
        );
        assert_eq!(stage_of(1000, &p).unwrap(), 0);
        assert_eq!(stage_of(750, &p).unwrap(), 1);
        assert_eq!(stage_of(751, &p).unwrap(), 0);
        assert_eq!(stage_of(1, &p).unwrap(), 3);
        assert!(stage_of(0, &p).is_err());
        assert!(stage_of(1001, &p).is_err());
    }

    #[test]
    fn stages_receive_equal_counts_and_cover_all_timesteps() {
        let p = StagePartition::new(1000, 4).unwrap();
        let mut counts = vec![0usize; 4];
        let mut last = 0;
        for t in (1..=1000).rev() {
            let s = stage_of(t, &p).unwrap();
            counts[s] += 1;
            assert!(s >= last, "non-decreasing as t decreases");
            last = s;
        }
        assert_eq!(counts, vec![250; 4]);
    }

    #[test]
    fn signal_coefficient_strictly_decreases() {
        let s = make_schedule(200, BETA_START, BETA_END).unwrap();
        for t in 2..=200 {
            assert!(s.alpha_hat(t).sqrt() < s.alpha_hat(t - 1).sqrt());
        }
    }

    #[test]
    fn subsample_rederives_coefficients_from_hat_ratios() {
        let s = make_schedule(1000, BETA_START, BETA_END).unwrap();
        let sub = s.subsample(50).unwrap();
        assert_eq!(sub.steps(), 50);
        assert_eq!(*sub.taus.last().unwrap(), 1000);
        let mut prev = 1.0;
        for i in 0..50 {
            assert!((sub.alpha[i] - sub.alpha_hat[i] / prev).abs() < 1e-15);
            assert_eq!(sub.alpha_hat[i], s.alpha_hat(sub.taus[i]));
            prev = sub.alpha_hat[i];
        }
        assert!(s.subsample(0).is_err());
        assert!(s.subsample(1001).is_err());
    }
}
