//! The conditional denoising UNet and its stage-expert wrapper.
//!
//! One full UNet parameter set exists per timestep stage; exactly one
//! is active at any sampling step, so per-step compute is independent
//! of the number of stage experts.

use latentsr_tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::moe::SpaceMoeLayer;
use crate::nn::{
    named_params, param_count, AttentionBlock, Conv2d, Downsample, GroupNorm, Linear, ParamSet,
    ResBlock, Upsample,
};
use crate::schedule::{stage_of, StagePartition};
use crate::{Error, Result};

/// Architecture of one denoising UNet.
#[derive(Debug, Clone)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub num_res_blocks: usize,
    pub attention_resolutions: Vec<usize>,
    pub head_channels: usize,
    pub norm_groups: usize,
    pub num_space_experts: usize,
    pub ffn_mult: usize,
    pub gamma: f64,
    /// Spatial extent of the latent the UNet runs on.
    pub input_size: usize,
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn time_embed_dim(&self) -> usize {
        4 * self.base_channels
    }

    /// Spatial size at pyramid level `i`.
    pub fn size_at(&self, level: usize) -> usize {
        self.input_size >> level
    }

    pub fn has_attention(&self, level: usize) -> bool {
        self.attention_resolutions.contains(&self.size_at(level))
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mult.is_empty() {
            return Err(Error::Config("channel_multiplier must be non-empty".into()));
        }
        if self.input_size % (1 << (self.levels() - 1)) != 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by 2^{}",
                self.input_size,
                self.levels() - 1
            )));
        }
        let achievable: Vec<usize> = (0..self.levels()).map(|l| self.size_at(l)).collect();
        for r in &self.attention_resolutions {
            if !achievable.contains(r) {
                return Err(Error::Config(format!(
                    "attention resolution {r} not reachable; feature maps are {achievable:?}"
                )));
            }
        }
        Ok(())
    }
}

struct BlockPair<T: Scalar> {
    res: ResBlock<T>,
    attn: Option<(AttentionBlock<T>, SpaceMoeLayer<T>)>,
}

struct DownLevel<T: Scalar> {
    blocks: Vec<BlockPair<T>>,
    down: Option<Downsample<T>>,
}

struct UpLevel<T: Scalar> {
    blocks: Vec<BlockPair<T>>,
    up: Option<Upsample<T>>,
}

/// LDM-style UNet: residual blocks, attention at configured
/// resolutions each followed by a Space-MoE FFN, skip connections.
pub struct UNet<T: Scalar> {
    pub cfg: UNetConfig,
    conv_in: Conv2d<T>,
    time_fc1: Linear<T>,
    time_fc2: Linear<T>,
    down: Vec<DownLevel<T>>,
    mid1: ResBlock<T>,
    mid_attn: AttentionBlock<T>,
    mid_moe: SpaceMoeLayer<T>,
    mid2: ResBlock<T>,
    up: Vec<UpLevel<T>>,
    out_norm: GroupNorm<T>,
    out_conv: Conv2d<T>,
}

impl<T: Scalar> UNet<T> {
    pub fn new(cfg: &UNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let emb = cfg.time_embed_dim();
        let make_pair = |c_in: usize,
                         c_out: usize,
                         level: usize,
                         rng: &mut ChaCha8Rng|
         -> BlockPair<T> {
            let res = ResBlock::new(c_in, c_out, cfg.norm_groups, Some(emb), rng);
            let attn = cfg.has_attention(level).then(|| {
                (
                    AttentionBlock::new(c_out, cfg.head_channels, cfg.norm_groups, rng),
                    SpaceMoeLayer::new(
                        c_out,
                        cfg.ffn_mult * c_out,
                        cfg.num_space_experts,
                        cfg.gamma,
                        cfg.norm_groups,
                        rng,
                    ),
                )
            });
            BlockPair { res, attn }
        };

        let conv_in = Conv2d::new(cfg.in_channels, c, 3, 1, 1, rng);
        let time_fc1 = Linear::new(c, emb, rng);
        let time_fc2 = Linear::new(emb, emb, rng);

        // Skip-channel bookkeeping mirrors the forward pass exactly.
        let mut skip_channels = vec![c];
        let mut ch = c;
        let mut down = Vec::new();
        for (level, &mult) in cfg.channel_mult.iter().enumerate() {
            let c_out = c * mult;
            let mut blocks = Vec::new();
            for _ in 0..cfg.num_res_blocks {
                blocks.push(make_pair(ch, c_out, level, rng));
                ch = c_out;
                skip_channels.push(ch);
            }
            let down_block = if level + 1 < cfg.levels() {
                skip_channels.push(ch);
                Some(Downsample::new(ch, rng))
            } else {
                None
            };
            down.push(DownLevel {
                blocks,
                down: down_block,
            });
        }

        let bottom = cfg.levels() - 1;
        let mid1 = ResBlock::new(ch, ch, cfg.norm_groups, Some(emb), rng);
        let mid_attn = AttentionBlock::new(ch, cfg.head_channels, cfg.norm_groups, rng);
        let mid_moe = SpaceMoeLayer::new(
            ch,
            cfg.ffn_mult * ch,
            cfg.num_space_experts,
            cfg.gamma,
            cfg.norm_groups,
            rng,
        );
        let _ = bottom;
        let mid2 = ResBlock::new(ch, ch, cfg.norm_groups, Some(emb), rng);

        let mut up = Vec::new();
        for (level, &mult) in cfg.channel_mult.iter().enumerate().rev() {
            let c_out = c * mult;
            let mut blocks = Vec::new();
            for _ in 0..=cfg.num_res_blocks {
                let skip = skip_channels.pop().expect("push/pop counts match");
                blocks.push(make_pair(ch + skip, c_out, level, rng));
                ch = c_out;
            }
            let up_block = (level > 0).then(|| Upsample::new(ch, rng));
            up.push(UpLevel {
                blocks,
                up: up_block,
            });
        }
        debug_assert!(skip_channels.is_empty());

        Ok(UNet {
            cfg: cfg.clone(),
            conv_in,
            time_fc1,
            time_fc2,
            down,
            mid1,
            mid_attn,
            mid_moe,
            mid2,
            up,
            out_norm: GroupNorm::new(ch, cfg.norm_groups),
            // Zero-initialized so the initial prediction is exactly zero.
            out_conv: Conv2d::new_zeroed(ch, cfg.out_channels, 3, 1, 1),
        })
    }

    /// `x` is the channel-concatenated (condition, z_t) input.
    ///
    /// `route_rng` enables training-mode token routing in the MoE
    /// layers; `None` requires every MoE layer to be merged.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        t: usize,
        route_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<T>> {
        let (b, _, h, w) = match x.shape() {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => return Err(Error::Model(format!("unet expects NCHW, got {s:?}"))),
        };
        let depth_div = 1 << (self.cfg.levels() - 1);
        if h % depth_div != 0 || w % depth_div != 0 {
            return Err(Error::Model(format!(
                "spatial size {h}x{w} not divisible by 2^(depth-1) = {depth_div}"
            )));
        }
        let mut moe_rng = route_rng.map(|r| ChaCha8Rng::seed_from_u64(r.gen()));
        let emb = crate::nn::timestep_embedding::<T>(t, self.cfg.base_channels, b);
        let emb = self.time_fc2.forward(&self.time_fc1.forward(&emb)?.silu()?)?;

        let run_pair = |pair: &BlockPair<T>,
                        h: &Tensor<T>,
                        moe_rng: &mut Option<ChaCha8Rng>|
         -> Result<Tensor<T>> {
            let mut out = pair.res.forward(h, Some(&emb))?;
            if let Some((attn, moe)) = &pair.attn {
                out = attn.forward(&out)?;
                out = moe.forward(&out, moe_rng.as_mut())?;
            }
            Ok(out)
        };

        let mut hs = Vec::new();
        let mut hid = self.conv_in.forward(x)?;
        hs.push(hid.clone());
        for level in &self.down {
            for pair in &level.blocks {
                hid = run_pair(pair, &hid, &mut moe_rng)?;
                hs.push(hid.clone());
            }
            if let Some(d) = &level.down {
                hid = d.forward(&hid)?;
                hs.push(hid.clone());
            }
        }
        hid = self.mid1.forward(&hid, Some(&emb))?;
        hid = self.mid_attn.forward(&hid)?;
        hid = self.mid_moe.forward(&hid, moe_rng.as_mut())?;
        hid = self.mid2.forward(&hid, Some(&emb))?;
        for level in &self.up {
            for pair in &level.blocks {
                let skip = hs.pop().expect("skip stack balanced");
                hid = Tensor::concat_channels(&hid, &skip)?;
                hid = run_pair(pair, &hid, &mut moe_rng)?;
            }
            if let Some(u) = &level.up {
                hid = u.forward(&hid)?;
            }
        }
        debug_assert!(hs.is_empty());
        self.out_conv.forward(&self.out_norm.forward(&hid)?.silu()?)
    }

    /// Apply momentum weight sharing to every MoE layer.
    pub fn momentum_share_all(&mut self) {
        for layer in self.moe_layers_mut() {
            layer.momentum_share();
        }
    }

    /// Copy of this UNet with every MoE layer merged for inference.
    pub fn merged(&self) -> Result<UNet<T>> {
        // Rebuild through the parameter registry: clone all params, then
        // overwrite MoE layers with their merged forms.
        let mut out = UNet::clone_params(self)?;
        for (dst, src) in out.moe_layers_mut().into_iter().zip(self.moe_layers()) {
            *dst = src.merged();
        }
        Ok(out)
    }

    fn clone_params(&self) -> Result<UNet<T>> {
        let mut fresh = UNet::new(&self.cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        let src = named_params(self, "unet");
        let mut by_name: std::collections::HashMap<String, Tensor<T>> = src.into_iter().collect();
        fresh.visit_mut("unet", &mut |name, t| {
            let replacement = by_name.remove(name).expect("identical architectures");
            *t = replacement.detach_var();
        });
        Ok(fresh)
    }

    pub fn moe_layers(&self) -> Vec<&SpaceMoeLayer<T>> {
        let mut v = Vec::new();
        for level in &self.down {
            for pair in &level.blocks {
                if let Some((_, moe)) = &pair.attn {
                    v.push(moe);
                }
            }
        }
        v.push(&self.mid_moe);
        for level in &self.up {
            for pair in &level.blocks {
                if let Some((_, moe)) = &pair.attn {
                    v.push(moe);
                }
            }
        }
        v
    }

    pub fn moe_layers_mut(&mut self) -> Vec<&mut SpaceMoeLayer<T>> {
        let mut v = Vec::new();
        for level in &mut self.down {
            for pair in &mut level.blocks {
                if let Some((_, moe)) = &mut pair.attn {
                    v.push(moe);
                }
            }
        }
        v.push(&mut self.mid_moe);
        for level in &mut self.up {
            for pair in &mut level.blocks {
                if let Some((_, moe)) = &mut pair.attn {
                    v.push(moe);
                }
            }
        }
        v
    }
}

impl<T: Scalar> ParamSet<T> for BlockPair<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.res.visit(&format!("{prefix}.res"), f);
        if let Some((attn, moe)) = &self.attn {
            attn.visit(&format!("{prefix}.attn"), f);
            moe.visit(&format!("{prefix}.moe"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.res.visit_mut(&format!("{prefix}.res"), f);
        if let Some((attn, moe)) = &mut self.attn {
            attn.visit_mut(&format!("{prefix}.attn"), f);
            moe.visit_mut(&format!("{prefix}.moe"), f);
        }
    }
}

impl<T: Scalar> ParamSet<T> for UNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.conv_in.visit(&format!("{prefix}.conv_in"), f);
        self.time_fc1.visit(&format!("{prefix}.time_fc1"), f);
        self.time_fc2.visit(&format!("{prefix}.time_fc2"), f);
        for (i, level) in self.down.iter().enumerate() {
            for (j, pair) in level.blocks.iter().enumerate() {
                pair.visit(&format!("{prefix}.down{i}.block{j}"), f);
            }
            if let Some(d) = &level.down {
                d.visit(&format!("{prefix}.down{i}.downsample"), f);
            }
        }
        self.mid1.visit(&format!("{prefix}.mid1"), f);
        self.mid_attn.visit(&format!("{prefix}.mid_attn"), f);
        self.mid_moe.visit(&format!("{prefix}.mid_moe"), f);
        self.mid2.visit(&format!("{prefix}.mid2"), f);
        for (i, level) in self.up.iter().enumerate() {
            for (j, pair) in level.blocks.iter().enumerate() {
                pair.visit(&format!("{prefix}.up{i}.block{j}"), f);
            }
            if let Some(u) = &level.up {
                u.visit(&format!("{prefix}.up{i}.upsample"), f);
            }
        }
        self.out_norm.visit(&format!("{prefix}.out_norm"), f);
        self.out_conv.visit(&format!("{prefix}.out_conv"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv_in.visit_mut(&format!("{prefix}.conv_in"), f);
        self.time_fc1.visit_mut(&format!("{prefix}.time_fc1"), f);
        self.time_fc2.visit_mut(&format!("{prefix}.time_fc2"), f);
        for (i, level) in self.down.iter_mut().enumerate() {
            for (j, pair) in level.blocks.iter_mut().enumerate() {
                pair.visit_mut(&format!("{prefix}.down{i}.block{j}"), f);
            }
            if let Some(d) = &mut level.down {
                d.visit_mut(&format!("{prefix}.down{i}.downsample"), f);
            }
        }
        self.mid1.visit_mut(&format!("{prefix}.mid1"), f);
        self.mid_attn.visit_mut(&format!("{prefix}.mid_attn"), f);
        self.mid_moe.visit_mut(&format!("{prefix}.mid_moe"), f);
        self.mid2.visit_mut(&format!("{prefix}.mid2"), f);
        for (i, level) in self.up.iter_mut().enumerate() {
            for (j, pair) in level.blocks.iter_mut().enumerate() {
                pair.visit_mut(&format!("{prefix}.up{i}.block{j}"), f);
            }
            if let Some(u) = &mut level.up {
                u.visit_mut(&format!("{prefix}.up{i}.upsample"), f);
            }
        }
        self.out_norm.visit_mut(&format!("{prefix}.out_norm"), f);
        self.out_conv.visit_mut(&format!("{prefix}.out_conv"), f);
    }
}

/// The full denoiser: N architecturally identical stage experts plus
/// the timestep partition that dispatches between them.
pub struct DenoiserModel<T: Scalar> {
    pub experts: Vec<UNet<T>>,
    pub partition: StagePartition,
}

impl<T: Scalar> DenoiserModel<T> {
    pub fn new(
        cfg: &UNetConfig,
        partition: StagePartition,
        seed: u64,
    ) -> Result<Self> {
        let mut experts = Vec::with_capacity(partition.num_stages());
        for i in 0..partition.num_stages() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5151_0000 + i as u64));
            experts.push(UNet::new(cfg, &mut rng)?);
        }
        Ok(DenoiserModel { experts, partition })
    }

    pub fn stage_for(&self, t: usize) -> Result<usize> {
        stage_of(t, &self.partition)
    }

    /// Predict the injected noise for `z_t` conditioned on the
    /// upsampled low-resolution image.
    pub fn forward(
        &self,
        z_t: &Tensor<T>,
        cond: &Tensor<T>,
        t: usize,
        route_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<T>> {
        let stage = self.stage_for(t)?;
        let x = Tensor::concat_channels(cond, z_t)?;
        self.experts[stage].forward(&x, t, route_rng)
    }

    /// Single-expert parameter count (identical across experts).
    pub fn params_per_expert(&self) -> usize {
        param_count(&self.experts[0])
    }

    pub fn total_params(&self) -> usize {
        self.experts.iter().map(|e| param_count(e)).sum()
    }

    /// Inference copy: every Space-MoE layer averaged into one FFN.
    pub fn merged(&self) -> Result<DenoiserModel<T>> {
        Ok(DenoiserModel {
            experts: self
                .experts
                .iter()
                .map(|e| e.merged())
                .collect::<Result<Vec<_>>>()?,
            partition: self.partition,
        })
    }

    pub fn momentum_share_all(&mut self) {
        for e in &mut self.experts {
            e.momentum_share_all();
        }
    }
}

impl<T: Scalar> ParamSet<T> for DenoiserModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, e) in self.experts.iter().enumerate() {
            e.visit(&format!("{prefix}.stage{i}"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_mut(&format!("{prefix}.stage{i}"), f);
        }
    }
}
