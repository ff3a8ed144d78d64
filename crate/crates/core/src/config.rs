//! Run configuration: TOML sections covering every tunable in the
//! pipeline. Unknown keys are rejected; all defaults are the desk-scale
//! setting (a full-scale reference file ships under `configs/`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::{DecoderMode, VqConfig};
use crate::denoiser::UNetConfig;
use crate::schedule::{make_schedule, NoiseSchedule, StagePartition};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Worker threads for dataset synthesis; training is single-threaded.
    pub threads: usize,
    pub out_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 42,
            threads: 1,
            out_dir: "runs/desk".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub dataset_dir: String,
    pub n_train: usize,
    pub n_holdout: usize,
    pub hr_size: usize,
    pub scale: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dataset_dir: "data/desk".into(),
            n_train: 256,
            n_holdout: 20,
            hr_size: 64,
            scale: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub num_stages: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            timesteps: 1000,
            beta_start: 1.5e-4,
            beta_end: 1.95e-2,
            num_stages: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSection {
    pub channels: usize,
    pub channel_multiplier: Vec<usize>,
    pub num_res_blocks: usize,
    pub attention_resolutions: Vec<usize>,
    pub head_channels: usize,
    pub norm_groups: usize,
    pub num_sampling_experts: usize,
    pub num_space_experts: usize,
    pub ffn_mult: usize,
    pub gamma: f64,
    pub disable_sampling_moe: bool,
    pub disable_space_moe: bool,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        DenoiserSection {
            channels: 32,
            channel_multiplier: vec![1, 2],
            num_res_blocks: 1,
            attention_resolutions: vec![8],
            head_channels: 16,
            norm_groups: 8,
            num_sampling_experts: 4,
            num_space_experts: 4,
            ffn_mult: 4,
            gamma: 0.999,
            disable_sampling_moe: false,
            disable_space_moe: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderSection {
    pub embed_dim: usize,
    pub n_embed: usize,
    pub z_channels: usize,
    pub channels: usize,
    pub channel_multiplier: Vec<usize>,
    pub num_res_blocks: usize,
    pub dropout: f64,
    pub num_fusion_layers: usize,
    pub num_aff_blocks: usize,
    pub ffl_lambda: f64,
    pub ffl_alpha: f64,
    pub norm_groups: usize,
    pub decoder_mode: String,
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        AutoencoderSection {
            embed_dim: 3,
            n_embed: 512,
            z_channels: 3,
            channels: 32,
            channel_multiplier: vec![1, 2, 4],
            num_res_blocks: 2,
            dropout: 0.0,
            num_fusion_layers: 1,
            num_aff_blocks: 1,
            ffl_lambda: 10.0,
            ffl_alpha: 1.0,
            norm_groups: 8,
            decoder_mode: "aff_ffl".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub log_interval: usize,
    pub smooth_window: usize,
}

impl TrainSection {
    fn stage1_default() -> Self {
        TrainSection {
            steps: 2000,
            batch_size: 4,
            lr: 5e-5,
            log_interval: 25,
            smooth_window: 100,
        }
    }

    fn stage2_default() -> Self {
        TrainSection {
            steps: 2000,
            batch_size: 4,
            lr: 1e-4,
            log_interval: 25,
            smooth_window: 100,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self::stage1_default()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    pub steps: usize,
    /// Reverse-chain steps used when generating LR-latent pairs.
    pub pair_gen_steps: usize,
    pub n_pairs: usize,
}

impl Default for InferSection {
    fn default() -> Self {
        InferSection {
            steps: 200,
            pair_gen_steps: 50,
            n_pairs: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub schedule: ScheduleSection,
    pub denoiser: DenoiserSection,
    pub autoencoder: AutoencoderSection,
    pub train_stage1: TrainSection,
    pub train_stage2: TrainSection,
    pub infer: InferSection,
}

impl RunConfig {
    pub fn desk_default() -> Self {
        RunConfig {
            train_stage2: TrainSection::stage2_default(),
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        // A file without [train_stage2] still gets the stage-2 lr.
        if !text.contains("[train_stage2]") {
            cfg.train_stage2 = TrainSection::stage2_default();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialized config.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        hex(&hasher.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.scale == 0 || self.data.hr_size % self.data.scale != 0 {
            return Err(Error::Config(format!(
                "hr_size {} must be divisible by scale {}",
                self.data.hr_size, self.data.scale
            )));
        }
        let f = self.vq_config().downsample_factor();
        if self.data.hr_size % f != 0 {
            return Err(Error::Config(format!(
                "hr_size {} must be divisible by the autoencoder factor {f}",
                self.data.hr_size
            )));
        }
        let latent = self.latent_size();
        if latent % self.lr_size() != 0 && self.lr_size() % latent != 0 {
            return Err(Error::Config(format!(
                "lr extent {} incompatible with latent extent {latent}",
                self.lr_size()
            )));
        }
        if self.schedule.timesteps % self.num_stages() != 0 {
            return Err(Error::Config(format!(
                "{} timesteps not divisible into {} stages",
                self.schedule.timesteps,
                self.num_stages()
            )));
        }
        if self.infer.steps == 0 || self.infer.steps > self.schedule.timesteps {
            return Err(Error::Config(format!(
                "infer steps {} out of 1..={}",
                self.infer.steps, self.schedule.timesteps
            )));
        }
        self.unet_config().validate()?;
        self.vq_config().validate()?;
        DecoderMode::parse(&self.autoencoder.decoder_mode)?;
        if self.run.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lr_size(&self) -> usize {
        self.data.hr_size / self.data.scale
    }

    pub fn latent_size(&self) -> usize {
        self.data.hr_size / self.vq_config().downsample_factor()
    }

    pub fn num_stages(&self) -> usize {
        if self.denoiser.disable_sampling_moe {
            1
        } else {
            self.schedule.num_stages
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(
            self.schedule.timesteps,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )
    }

    pub fn stage_partition(&self) -> Result<StagePartition> {
        StagePartition::new(self.schedule.timesteps, self.num_stages())
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            in_channels: 3 + self.autoencoder.z_channels,
            out_channels: self.autoencoder.z_channels,
            base_channels: self.denoiser.channels,
            channel_mult: self.denoiser.channel_multiplier.clone(),
            num_res_blocks: self.denoiser.num_res_blocks,
            attention_resolutions: self.denoiser.attention_resolutions.clone(),
            head_channels: self.denoiser.head_channels,
            norm_groups: self.denoiser.norm_groups,
            num_space_experts: if self.denoiser.disable_space_moe {
                1
            } else {
                self.denoiser.num_space_experts
            },
            ffn_mult: self.denoiser.ffn_mult,
            gamma: self.denoiser.gamma,
            input_size: self.latent_size(),
        }
    }

    pub fn vq_config(&self) -> VqConfig {
        VqConfig {
            embed_dim: self.autoencoder.embed_dim,
            n_embed: self.autoencoder.n_embed,
            z_channels: self.autoencoder.z_channels,
            channels: self.autoencoder.channels,
            channel_mult: self.autoencoder.channel_multiplier.clone(),
            num_res_blocks: self.autoencoder.num_res_blocks,
            dropout: self.autoencoder.dropout,
            num_fusion_layers: self.autoencoder.num_fusion_layers,
            num_aff_blocks: self.autoencoder.num_aff_blocks,
            ffl_lambda: self.autoencoder.ffl_lambda,
            ffl_alpha: self.autoencoder.ffl_alpha,
            norm_groups: self.autoencoder.norm_groups,
        }
    }

    pub fn decoder_mode(&self) -> Result<DecoderMode> {
        DecoderMode::parse(&self.autoencoder.decoder_mode)
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        Path::new(&self.run.out_dir).join(name)
    }

    pub fn dataset_path(&self, name: &str) -> PathBuf {
        Path::new(&self.data.dataset_dir).join(name)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
