//! Optimization: Adam, the two training stages, loss logs, and
//! checkpoint persistence.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use latentsr_tensor::{backward, no_grad, Scalar, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{focal_frequency_loss, Autoencoder};
use crate::config::RunConfig;
use crate::data::{ImagePair, LrLatentPair, TensorArchive};
use crate::denoiser::{condition_upsample, DenoiserModel};
use crate::nn::ParamSet;
use crate::schedule::{eps_loss, forward_noise, randn, NoiseSchedule};
use crate::{Error, Result};

/// Adam with per-parameter state keyed by the stable parameter name;
/// parameters that receive no gradient in a step are left untouched.
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<String, AdamSlot<T>>,
}

struct AdamSlot<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: HashMap::new(),
        }
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) {
        let n = param.numel();
        let slot = self.state.entry(name.to_string()).or_insert_with(|| AdamSlot {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        });
        slot.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
        let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
        let mut data = param.to_vec();
        for i in 0..n {
            let g = grad.data()[i];
            slot.m[i] = b1 * slot.m[i] + (one - b1) * g;
            slot.v[i] = b2 * slot.v[i] + (one - b2) * g * g;
            let m_hat = slot.m[i].to_f64() / bc1;
            let v_hat = slot.v[i].to_f64() / bc2;
            data[i] =
                T::from_f64(data[i].to_f64() - self.lr * m_hat / (v_hat.sqrt() + self.eps));
        }
        *param = Tensor::var(data, param.shape()).expect("consistent shape");
    }

    /// Apply gradients to every parameter of `set` that has one.
    pub fn step(&mut self, set: &mut dyn ParamSet<T>, grads: &latentsr_tensor::GradStore<T>) {
        let mut by_name: HashMap<String, Tensor<T>> = HashMap::new();
        set.visit("", &mut |name, t| {
            if let Some(g) = grads.get(t) {
                by_name.insert(name.to_string(), g.clone());
            }
        });
        let mut applied = 0usize;
        set.visit_mut("", &mut |name, t| {
            if let Some(g) = by_name.get(name) {
                self.update(name, t, g);
                applied += 1;
            }
        });
        debug_assert_eq!(applied, by_name.len(), "visit orders must agree");
    }

    /// Persist moments into a checkpoint archive.
    pub fn save_state(&self, arc: &mut TensorArchive) {
        let mut names: Vec<&String> = self.state.keys().collect();
        names.sort();
        for name in names {
            let slot = &self.state[name];
            let m: Vec<f32> = slot.m.iter().map(|&v| v.to_f64() as f32).collect();
            let v: Vec<f32> = slot.v.iter().map(|&v| v.to_f64() as f32).collect();
            let len = m.len();
            arc.push_f32(&format!("opt.{name}.m"), &[len], m);
            arc.push_f32(&format!("opt.{name}.v"), &[len], v);
            arc.push_u32(&format!("opt.{name}.t"), &[1], vec![slot.t as u32]);
        }
    }
}

/// One loss record per logged step.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

/// Full in-memory loss trace plus the periodic log lines written out.
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub records: Vec<LossRecord>,
}

impl TrainLog {
    /// Mean of the first `window` raw losses.
    pub fn initial_smoothed(&self, window: usize) -> f64 {
        let w = window.min(self.losses.len()).max(1);
        self.losses[..w].iter().sum::<f64>() / w as f64
    }

    /// Mean of the last `window` raw losses.
    pub fn final_smoothed(&self, window: usize) -> f64 {
        let w = window.min(self.losses.len()).max(1);
        self.losses[self.losses.len() - w..].iter().sum::<f64>() / w as f64
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for r in &self.records {
            let line = serde_json::to_string(r).expect("record serializes");
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Assemble a batch tensor from same-shaped CHW tensors.
pub fn stack<T: Scalar>(items: &[&Tensor<T>]) -> Tensor<T> {
    assert!(!items.is_empty());
    let shape = items[0].shape();
    let mut out_shape = vec![items.len()];
    out_shape.extend_from_slice(shape);
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for it in items {
        assert_eq!(it.shape(), shape);
        data.extend_from_slice(it.data());
    }
    Tensor::from_vec(data, &out_shape).expect("consistent shape")
}

/// Stage 1: train the stage-expert denoiser to predict injected noise
/// in the frozen encoder's latent space, with momentum weight sharing
/// applied to every Space-MoE layer once per optimizer step.
pub fn train_stage1(
    dataset: &[ImagePair],
    model: &mut DenoiserModel<f32>,
    autoencoder: &Autoencoder<f32>,
    schedule: &NoiseSchedule,
    cfg: &RunConfig,
) -> Result<(TrainLog, Adam<f32>)> {
    if dataset.is_empty() {
        return Err(Error::Training("empty training dataset".into()));
    }
    let tcfg = &cfg.train_stage1;
    let latent_size = cfg.latent_size();
    // Precompute latent targets and conditioning planes once; both the
    // encoder and the degradation are fixed.
    let mut latents = Vec::with_capacity(dataset.len());
    let mut conds = Vec::with_capacity(dataset.len());
    no_grad(|| -> Result<()> {
        for pair in dataset {
            let hr = pair.hr.reshape(&[1, 3, pair.hr.shape()[1], pair.hr.shape()[2]])?;
            let z = autoencoder.encode(&hr)?;
            let lr =
                pair.lr.reshape(&[1, 3, pair.lr.shape()[1], pair.lr.shape()[2]])?;
            let cond = condition_upsample(&lr, &[1, 3, latent_size, latent_size])?;
            latents.push(z);
            conds.push(cond);
        }
        Ok(())
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed ^ 0x51a6_0001);
    let mut adam = Adam::new(tcfg.lr);
    let mut losses = Vec::with_capacity(tcfg.steps);
    let mut records = Vec::new();
    let t_max = schedule.steps();

    for step in 1..=tcfg.steps {
        let t = rng.gen_range(1..=t_max);
        let idx: Vec<usize> = (0..tcfg.batch_size)
            .map(|_| rng.gen_range(0..dataset.len()))
            .collect();
        let z0_refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &latents[i]).collect();
        let cond_refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &conds[i]).collect();
        let z0 = squeeze_batch(&z0_refs);
        let cond = squeeze_batch(&cond_refs);
        let eps = randn::<f32>(z0.shape(), &mut rng);
        let z_t = no_grad(|| forward_noise(&z0, t, &eps, schedule))?;

        let mut route_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let eps_pred = model.forward(&z_t, &cond, t, Some(&mut route_rng))?;
        let loss = eps_loss(&eps, &eps_pred)?;
        let loss_val = loss.item() as f64;
        if !loss_val.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {loss_val} at step {step} (t={t})"
            )));
        }
        let grads = backward(&loss)?;
        adam.step(model, &grads);
        model.momentum_share_all();

        losses.push(loss_val);
        if step % tcfg.log_interval == 0 {
            records.push(LossRecord {
                step,
                loss: loss_val,
            });
        }
    }
    Ok((TrainLog { losses, records }, adam))
}

/// Items stage 2 trains on: a degraded input, the latent the sampler
/// produced for it, and the ground-truth target.
pub struct Stage2Item {
    pub lr: Tensor<f32>,
    pub latent: Tensor<f32>,
    pub hr: Tensor<f32>,
}

pub fn stage2_items(pairs: &[LrLatentPair], dataset: &[ImagePair]) -> Result<Vec<Stage2Item>> {
    if pairs.len() > dataset.len() {
        return Err(Error::Training(format!(
            "{} pairs but only {} dataset images",
            pairs.len(),
            dataset.len()
        )));
    }
    Ok(pairs
        .iter()
        .zip(dataset)
        .map(|(p, d)| Stage2Item {
            lr: p.lr.clone(),
            latent: p.latent.clone(),
            hr: d.hr.clone(),
        })
        .collect())
}

/// Stage 2: train the decode path (decoder, fusion, refinement, LR
/// extractor) on L1 + codebook terms + lambda * frequency loss.
pub fn train_stage2(
    items: &[Stage2Item],
    model: &mut Autoencoder<f32>,
    cfg: &RunConfig,
) -> Result<(TrainLog, Adam<f32>)> {
    if items.is_empty() {
        return Err(Error::Training("no stage-2 training items".into()));
    }
    let tcfg = &cfg.train_stage2;
    let mode = model.mode;
    let lambda = model.cfg.ffl_lambda;
    let alpha = model.cfg.ffl_alpha;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed ^ 0x51a6_0002);
    let mut adam = Adam::new(tcfg.lr);
    let mut losses = Vec::with_capacity(tcfg.steps);
    let mut records = Vec::new();

    for step in 1..=tcfg.steps {
        let idx: Vec<usize> = (0..tcfg.batch_size)
            .map(|_| rng.gen_range(0..items.len()))
            .collect();
        let lat_refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &items[i].latent).collect();
        let lr_refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &items[i].lr).collect();
        let hr_refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &items[i].hr).collect();
        let z = stack_maybe_batched(&lat_refs);
        let lr = stack_maybe_batched(&lr_refs);
        let hr = stack_maybe_batched(&hr_refs);

        let out = model.decode_conditioned(&z, &lr)?;
        let l1 = latentsr_tensor::l1(&out.image, &hr)?;
        let quarter = out.quant.commitment_loss.mul_scalar(0.25)?;
        let mut total = l1
            .add(&out.quant.codebook_loss)?
            .add(&quarter)?;
        if mode.uses_ffl() {
            let ffl = focal_frequency_loss(&hr, &out.image, alpha)?;
            total = total.add(&ffl.mul_scalar(lambda as f32)?)?;
        }
        let loss_val = total.item() as f64;
        if !loss_val.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {loss_val} at step {step}"
            )));
        }
        let grads = backward(&total)?;
        let mut trainable = model.trainable();
        adam.step(&mut trainable, &grads);

        // Track the L1 component for the reduction criterion.
        losses.push(l1.item() as f64);
        if step % tcfg.log_interval == 0 {
            records.push(LossRecord {
                step,
                loss: loss_val,
            });
        }
    }
    Ok((TrainLog { losses, records }, adam))
}

fn squeeze_batch(items: &[&Tensor<f32>]) -> Tensor<f32> {
    // Items are [1,C,H,W]; concatenate along batch.
    let shape = items[0].shape();
    let per = items[0].numel();
    let mut data = Vec::with_capacity(items.len() * per);
    for it in items {
        data.extend_from_slice(it.data());
    }
    let out_shape = [&[items.len()], &shape[1..]].concat();
    Tensor::from_vec(data, &out_shape).expect("consistent shape")
}

fn stack_maybe_batched(items: &[&Tensor<f32>]) -> Tensor<f32> {
    if items[0].shape().len() == 4 {
        squeeze_batch(items)
    } else {
        stack(items)
    }
}

/// Save any parameter set as a checkpoint archive.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    kind: &str,
    set: &dyn ParamSet<T>,
    meta: &[(&str, String)],
    optimizer: Option<&Adam<T>>,
) -> Result<()> {
    let mut arc = TensorArchive::new();
    arc.set_meta("kind", kind);
    for (k, v) in meta {
        arc.set_meta(k, v);
    }
    set.visit("model", &mut |name, t| arc.push_tensor(name, t));
    if let Some(opt) = optimizer {
        opt.save_state(&mut arc);
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    arc.write_to(path)
}

/// Load parameters by name into an already-constructed model; var-ness
/// of each destination tensor is preserved (frozen stays frozen).
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
    kind: &str,
    set: &mut dyn ParamSet<T>,
) -> Result<TensorArchive> {
    let arc = TensorArchive::read_from(path)?;
    match arc.get_meta("kind") {
        Some(k) if k == kind => {}
        other => {
            return Err(Error::Archive(format!(
                "checkpoint {} has kind {:?}, expected {kind:?}",
                path.display(),
                other
            )))
        }
    }
    let mut missing = Vec::new();
    set.visit_mut("model", &mut |name, t| {
        match arc.tensor_f32(name) {
            Ok(loaded) => {
                if loaded.shape() != t.shape() {
                    missing.push(format!(
                        "{name}: shape {:?} != expected {:?}",
                        loaded.shape(),
                        t.shape()
                    ));
                    return;
                }
                let data: Vec<T> = loaded.data().iter().map(|&v| T::from_f64(v as f64)).collect();
                *t = if t.is_var() {
                    Tensor::var(data, t.shape()).expect("consistent shape")
                } else {
                    Tensor::from_vec(data, t.shape()).expect("consistent shape")
                };
            }
            Err(_) => missing.push(format!("{name}: missing from checkpoint")),
        }
    });
    if !missing.is_empty() {
        return Err(Error::Archive(format!(
            "checkpoint {} incompatible: {}",
            path.display(),
            missing.join("; ")
        )));
    }
    Ok(arc)
}
