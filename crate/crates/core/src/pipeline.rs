//! End-to-end flows built from the trained pieces: reverse-chain
//! sampling, LR-latent pair generation, single-image inference, and
//! directory evaluation.

use std::path::Path;

use latentsr_tensor::{no_grad, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::Autoencoder;
use crate::config::RunConfig;
use crate::data::{load_ppm, LrLatentPair};
use crate::denoiser::{condition_upsample, DenoiserModel};
use crate::metrics::{aggregate, report, MetricReport};
use crate::schedule::{denoise_step_with, randn, NoiseSchedule};
use crate::{Error, Result};

/// Run the reverse chain from pure noise, conditioned on one LR image,
/// producing the clean latent. `steps` may subsample the schedule.
///
/// The model must be merged (deterministic MoE layers). The chain is
/// driven entirely by `rng`, so a fixed seed reproduces the latent.
pub fn sample_latent(
    model: &DenoiserModel<f32>,
    schedule: &NoiseSchedule,
    lr: &Tensor<f32>,
    latent_shape: &[usize],
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    let sub = schedule.subsample(steps)?;
    no_grad(|| -> Result<Tensor<f32>> {
        let cond = condition_upsample(lr, latent_shape)?;
        let cond = if cond.shape().len() == 3 {
            cond.reshape(&[1, cond.shape()[0], cond.shape()[1], cond.shape()[2]])?
        } else {
            cond
        };
        let mut z = randn::<f32>(latent_shape, rng);
        for i in (0..sub.steps()).rev() {
            let tau = sub.taus[i];
            let eps_pred = model.forward(&z, &cond, tau, None)?;
            let noise = if i > 0 {
                Some(randn::<f32>(latent_shape, rng))
            } else {
                None
            };
            z = denoise_step_with(&z, &eps_pred, sub.alpha[i], sub.alpha_hat[i], noise.as_ref())?;
        }
        Ok(z)
    })
}

/// Generate (lr, latent) pairs by sampling the merged stage-1 model
/// once per LR image. Deterministic in `seed`.
pub fn gen_lr_latent_pairs(
    model: &DenoiserModel<f32>,
    schedule: &NoiseSchedule,
    lrs: &[Tensor<f32>],
    latent_size: usize,
    z_channels: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<LrLatentPair>> {
    let mut pairs = Vec::with_capacity(lrs.len());
    for (i, lr) in lrs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9a17_0000 + i as u64));
        let latent = sample_latent(
            model,
            schedule,
            lr,
            &[1, z_channels, latent_size, latent_size],
            steps,
            &mut rng,
        )?;
        pairs.push(LrLatentPair {
            lr: lr.clone(),
            latent,
        });
    }
    Ok(pairs)
}

/// Super-resolve one LR image to `out_size` x `out_size`: sample a
/// latent with the merged denoiser, then decode conditioned on the LR
/// input. Returns `[3,H,W]`. Deterministic in `seed`.
pub fn infer_one(
    model: &DenoiserModel<f32>,
    autoencoder: &Autoencoder<f32>,
    schedule: &NoiseSchedule,
    lr: &Tensor<f32>,
    out_size: usize,
    steps: usize,
    seed: u64,
) -> Result<Tensor<f32>> {
    match lr.shape() {
        [3, _, _] => {}
        s => return Err(Error::Data(format!("infer expects a [3,H,W] LR image, got {s:?}"))),
    }
    let f = autoencoder.cfg.downsample_factor();
    if out_size % f != 0 {
        return Err(Error::Data(format!(
            "output extent {out_size} not divisible by autoencoder factor {f}"
        )));
    }
    let latent_size = out_size / f;
    let z_channels = autoencoder.cfg.z_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z0 = sample_latent(
        model,
        schedule,
        lr,
        &[1, z_channels, latent_size, latent_size],
        steps,
        &mut rng,
    )?;
    let out = no_grad(|| autoencoder.decode_conditioned(&z0, lr))?;
    out.image.reshape(&[3, out_size, out_size]).map_err(Error::Tensor)
}

/// Listing of PPM files in a directory, sorted by name.
pub fn list_ppms(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "ppm").unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

/// Pairwise metrics between equally named files of two directories.
pub fn eval_dirs(pred_dir: &Path, ref_dir: &Path) -> Result<Vec<(String, MetricReport)>> {
    let preds = list_ppms(pred_dir)?;
    let refs = list_ppms(ref_dir)?;
    if preds.len() != refs.len() {
        return Err(Error::Data(format!(
            "{} predictions vs {} references",
            preds.len(),
            refs.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("no .ppm files to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(preds.len());
    for (p, r) in preds.iter().zip(&refs) {
        let a = load_ppm(p)?;
        let b = load_ppm(r)?;
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        rows.push((name, report(&a, &b)?));
    }
    Ok(rows)
}

/// Aggregate of `eval_dirs` rows.
pub fn eval_aggregate(rows: &[(String, MetricReport)]) -> MetricReport {
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
    aggregate(&reports)
}

/// Per-channel standard deviation of a batch of latents; the sanity
/// band check for generated pairs.
pub fn latent_channel_stds(pairs: &[LrLatentPair]) -> Vec<f64> {
    if pairs.is_empty() {
        return Vec::new();
    }
    let c = pairs[0].latent.shape()[1];
    let mut stds = Vec::with_capacity(c);
    for ch in 0..c {
        let mut values = Vec::new();
        for p in pairs {
            let (b, cc, h, w) = (
                p.latent.shape()[0],
                p.latent.shape()[1],
                p.latent.shape()[2],
                p.latent.shape()[3],
            );
            debug_assert_eq!(b, 1);
            debug_assert_eq!(cc, c);
            let plane = h * w;
            values.extend(
                p.latent.data()[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|&v| v as f64),
            );
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / values.len() as f64;
        stds.push(var.sqrt());
    }
    stds
}

/// Decode held-out images through a trained decoder and measure the
/// mean log-spectral distance to the ground truth; the decoder
/// comparison used by the ablation checks.
pub fn holdout_lsd(
    autoencoder: &Autoencoder<f32>,
    holdout: &[crate::data::ImagePair],
) -> Result<f64> {
    if holdout.is_empty() {
        return Err(Error::Data("empty holdout set".into()));
    }
    let mut total = 0.0;
    for pair in holdout {
        let (h, w) = (pair.hr.shape()[1], pair.hr.shape()[2]);
        let hr = pair.hr.reshape(&[1, 3, h, w])?;
        let recon = no_grad(|| -> Result<Tensor<f32>> {
            let z = autoencoder.encode(&hr)?;
            let out = autoencoder.decode_conditioned(&z, &pair.lr)?;
            Ok(out.image.reshape(&[3, h, w])?)
        })?;
        total += crate::metrics::log_spectral_distance(&pair.hr, &recon)?;
    }
    Ok(total / holdout.len() as f64)
}

/// Convenience: dataset paths for the split produced by `gen-data`.
pub fn dataset_dirs(cfg: &RunConfig) -> (std::path::PathBuf, std::path::PathBuf) {
    (cfg.dataset_path("train"), cfg.dataset_path("holdout"))
}

/// Load an on-disk dataset split written by `gen-data`.
pub fn load_split(dir: &Path, scale: usize) -> Result<Vec<crate::data::ImagePair>> {
    let mut pairs = Vec::new();
    let files = list_ppms(dir)?;
    let hrs: Vec<_> = files
        .iter()
        .filter(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().starts_with("hr_"))
                .unwrap_or(false)
        })
        .collect();
    for hr_path in hrs {
        let name = hr_path.file_name().unwrap().to_string_lossy().into_owned();
        let lr_path = hr_path.with_file_name(name.replacen("hr_", "lr_", 1));
        if !lr_path.exists() {
            return Err(Error::Data(format!(
                "missing LR counterpart for {}",
                hr_path.display()
            )));
        }
        pairs.push(crate::data::ImagePair {
            hr: load_ppm(hr_path)?,
            lr: load_ppm(&lr_path)?,
            scale,
        });
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("no hr_*.ppm files in {}", dir.display())));
    }
    Ok(pairs)
}
