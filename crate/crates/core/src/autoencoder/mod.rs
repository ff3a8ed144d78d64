//! VQ autoencoder with the frequency-compensated decoder.
//!
//! The encoder and codebook are fixed after seeded initialization; the
//! decoding path (post-quant conv, decoder, low-resolution feature
//! fusion, frequency refinement) is what stage-2 training optimizes.

pub mod aff;
pub mod ffl;
pub mod vq;

pub use aff::{apply_freq_mask, AffBlock, PlainRefine};
pub use ffl::{focal_frequency_loss, FreqLossConfig};
pub use vq::{vq_quantize, QuantOutput};

use latentsr_tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::bicubic::bicubic_resize;
use crate::nn::{freeze, Conv2d, GroupNorm, ParamSet, ResBlock, Upsample};
use crate::{Error, Result};

/// Autoencoder architecture knobs.
#[derive(Debug, Clone)]
pub struct VqConfig {
    pub embed_dim: usize,
    pub n_embed: usize,
    pub z_channels: usize,
    pub channels: usize,
    pub channel_mult: Vec<usize>,
    pub num_res_blocks: usize,
    pub dropout: f64,
    pub num_fusion_layers: usize,
    pub num_aff_blocks: usize,
    pub ffl_lambda: f64,
    pub ffl_alpha: f64,
    pub norm_groups: usize,
}

impl VqConfig {
    /// Spatial reduction factor of the encoder.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.channel_mult.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mult.is_empty() {
            return Err(Error::Config("channel_multiplier must be non-empty".into()));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config(
                "dropout is accepted as a key but only 0.0 is supported at this scale".into(),
            ));
        }
        FreqLossConfig {
            lambda: self.ffl_lambda,
            alpha: self.ffl_alpha,
        }
        .validate()?;
        Ok(())
    }
}

/// Which decoder variant runs; mirrors the ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderMode {
    /// Plain VQ decode: no fusion, no refinement, no frequency loss.
    Baseline,
    /// Fusion + AFF refinement, L1-only training.
    Aff,
    /// Fusion, no refinement, frequency loss on.
    Ffl,
    /// Fusion + conv refinement, frequency loss on.
    UnetFfl,
    /// Fusion + AFF refinement + frequency loss: the full decoder.
    AffFfl,
}

impl DecoderMode {
    pub fn uses_fusion(self) -> bool {
        self != DecoderMode::Baseline
    }

    pub fn uses_ffl(self) -> bool {
        matches!(
            self,
            DecoderMode::Ffl | DecoderMode::UnetFfl | DecoderMode::AffFfl
        )
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.replace('+', "_").as_str() {
            "baseline" => Ok(DecoderMode::Baseline),
            "aff" => Ok(DecoderMode::Aff),
            "ffl" => Ok(DecoderMode::Ffl),
            "unet_ffl" => Ok(DecoderMode::UnetFfl),
            "aff_ffl" => Ok(DecoderMode::AffFfl),
            other => Err(Error::Config(format!(
                "unknown decoder mode {other:?}; expected baseline|aff|ffl|unet_ffl|aff_ffl"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DecoderMode::Baseline => "baseline",
            DecoderMode::Aff => "aff",
            DecoderMode::Ffl => "ffl",
            DecoderMode::UnetFfl => "unet_ffl",
            DecoderMode::AffFfl => "aff_ffl",
        }
    }
}

struct EncLevel<T: Scalar> {
    blocks: Vec<ResBlock<T>>,
    down: Option<Conv2d<T>>,
}

/// Convolutional encoder producing the continuous latent.
pub struct Encoder<T: Scalar> {
    conv_in: Conv2d<T>,
    levels: Vec<EncLevel<T>>,
    mid1: ResBlock<T>,
    mid2: ResBlock<T>,
    out_norm: GroupNorm<T>,
    out_conv: Conv2d<T>,
    factor: usize,
}

impl<T: Scalar> Encoder<T> {
    fn new(cfg: &VqConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let mut levels = Vec::new();
        let mut ch = c;
        let conv_in = Conv2d::new(3, c, 3, 1, 1, rng);
        for (i, &mult) in cfg.channel_mult.iter().enumerate() {
            let c_out = c * mult;
            let mut blocks = Vec::new();
            for _ in 0..cfg.num_res_blocks {
                blocks.push(ResBlock::new(ch, c_out, cfg.norm_groups, None, rng));
                ch = c_out;
            }
            let down = (i + 1 < cfg.channel_mult.len())
                .then(|| Conv2d::new(ch, ch, 3, 2, 1, rng));
            levels.push(EncLevel { blocks, down });
        }
        Encoder {
            conv_in,
            mid1: ResBlock::new(ch, ch, cfg.norm_groups, None, rng),
            mid2: ResBlock::new(ch, ch, cfg.norm_groups, None, rng),
            out_norm: GroupNorm::new(ch, cfg.norm_groups),
            out_conv: Conv2d::new(ch, cfg.z_channels, 3, 1, 1, rng),
            levels,
            factor: cfg.downsample_factor(),
        }
    }

    fn forward(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, h, w) = match img.shape() {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => return Err(Error::Model(format!("encoder expects NCHW, got {s:?}"))),
        };
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::Model(format!(
                "image extent {h}x{w} not divisible by downsample factor {}",
                self.factor
            )));
        }
        let mut x = self.conv_in.forward(img)?;
        for level in &self.levels {
            for block in &level.blocks {
                x = block.forward(&x, None)?;
            }
            if let Some(down) = &level.down {
                x = down.forward(&x)?;
            }
        }
        x = self.mid1.forward(&x, None)?;
        x = self.mid2.forward(&x, None)?;
        self.out_conv.forward(&self.out_norm.forward(&x)?.silu()?)
    }
}

impl<T: Scalar> ParamSet<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.conv_in.visit(&format!("{prefix}.conv_in"), f);
        for (i, level) in self.levels.iter().enumerate() {
            for (j, b) in level.blocks.iter().enumerate() {
                b.visit(&format!("{prefix}.level{i}.block{j}"), f);
            }
            if let Some(d) = &level.down {
                d.visit(&format!("{prefix}.level{i}.down"), f);
            }
        }
        self.mid1.visit(&format!("{prefix}.mid1"), f);
        self.mid2.visit(&format!("{prefix}.mid2"), f);
        self.out_norm.visit(&format!("{prefix}.out_norm"), f);
        self.out_conv.visit(&format!("{prefix}.out_conv"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv_in.visit_mut(&format!("{prefix}.conv_in"), f);
        for (i, level) in self.levels.iter_mut().enumerate() {
            for (j, b) in level.blocks.iter_mut().enumerate() {
                b.visit_mut(&format!("{prefix}.level{i}.block{j}"), f);
            }
            if let Some(d) = &mut level.down {
                d.visit_mut(&format!("{prefix}.level{i}.down"), f);
            }
        }
        self.mid1.visit_mut(&format!("{prefix}.mid1"), f);
        self.mid2.visit_mut(&format!("{prefix}.mid2"), f);
        self.out_norm.visit_mut(&format!("{prefix}.out_norm"), f);
        self.out_conv.visit_mut(&format!("{prefix}.out_conv"), f);
    }
}

/// Trainable residual fusion of low-resolution features into decoder
/// features: `F_m = F_d + C(F_lr, F_d)` with a zero-initialized final
/// convolution so fusion starts inert.
pub struct FusionBlock<T: Scalar> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
}

impl<T: Scalar> FusionBlock<T> {
    fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        FusionBlock {
            conv1: Conv2d::new(2 * channels, channels, 3, 1, 1, rng),
            conv2: Conv2d::new_zeroed(channels, channels, 3, 1, 1),
        }
    }

    pub fn forward(&self, f_lr: &Tensor<T>, f_d: &Tensor<T>) -> Result<Tensor<T>> {
        let joint = Tensor::concat_channels(f_lr, f_d)?;
        let residual = self.conv2.forward(&self.conv1.forward(&joint)?.silu()?)?;
        Ok(f_d.add(&residual)?)
    }
}

impl<T: Scalar> ParamSet<T> for FusionBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
    }
}

/// Truncated encoder over the upsampled LR image; produces the features
/// the fusion blocks consume (full resolution, level-0 channels).
pub struct LrExtractor<T: Scalar> {
    conv_in: Conv2d<T>,
    block: ResBlock<T>,
}

impl<T: Scalar> LrExtractor<T> {
    fn new(channels: usize, norm_groups: usize, rng: &mut ChaCha8Rng) -> Self {
        LrExtractor {
            conv_in: Conv2d::new(3, channels, 3, 1, 1, rng),
            block: ResBlock::new(channels, channels, norm_groups, None, rng),
        }
    }

    pub fn forward(&self, lr_up: &Tensor<T>) -> Result<Tensor<T>> {
        self.block.forward(&self.conv_in.forward(lr_up)?, None)
    }
}

impl<T: Scalar> ParamSet<T> for LrExtractor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.conv_in.visit(&format!("{prefix}.conv_in"), f);
        self.block.visit(&format!("{prefix}.block"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv_in.visit_mut(&format!("{prefix}.conv_in"), f);
        self.block.visit_mut(&format!("{prefix}.block"), f);
    }
}

/// Refinement network inserted after the last upsample stage.
pub enum RefineNet<T: Scalar> {
    None,
    Aff(Vec<AffBlock<T>>),
    Plain(PlainRefine<T>),
}

impl<T: Scalar> RefineNet<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            RefineNet::None => Ok(x.clone()),
            RefineNet::Aff(blocks) => {
                let mut h = x.clone();
                for b in blocks {
                    h = b.forward(&h)?;
                }
                Ok(h)
            }
            RefineNet::Plain(p) => p.forward(x),
        }
    }
}

impl<T: Scalar> ParamSet<T> for RefineNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        match self {
            RefineNet::None => {}
            RefineNet::Aff(blocks) => {
                for (i, b) in blocks.iter().enumerate() {
                    b.visit(&format!("{prefix}.aff{i}"), f);
                }
            }
            RefineNet::Plain(p) => p.visit(&format!("{prefix}.plain"), f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match self {
            RefineNet::None => {}
            RefineNet::Aff(blocks) => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    b.visit_mut(&format!("{prefix}.aff{i}"), f);
                }
            }
            RefineNet::Plain(p) => p.visit_mut(&format!("{prefix}.plain"), f),
        }
    }
}

struct DecLevel<T: Scalar> {
    blocks: Vec<ResBlock<T>>,
    up: Option<Upsample<T>>,
}

/// Decoder with optional LR-feature fusion at the full-resolution stage
/// and a refinement network after the last upsample block.
pub struct Decoder<T: Scalar> {
    conv_in: Conv2d<T>,
    mid1: ResBlock<T>,
    mid2: ResBlock<T>,
    levels: Vec<DecLevel<T>>,
    fusion: Vec<FusionBlock<T>>,
    refine: RefineNet<T>,
    out_norm: GroupNorm<T>,
    out_conv: Conv2d<T>,
}

impl<T: Scalar> Decoder<T> {
    fn new(cfg: &VqConfig, mode: DecoderMode, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let mut ch = c * cfg.channel_mult.last().unwrap();
        let conv_in = Conv2d::new(cfg.z_channels, ch, 3, 1, 1, rng);
        let mid1 = ResBlock::new(ch, ch, cfg.norm_groups, None, rng);
        let mid2 = ResBlock::new(ch, ch, cfg.norm_groups, None, rng);
        let mut levels = Vec::new();
        for (i, &mult) in cfg.channel_mult.iter().enumerate().rev() {
            let c_out = c * mult;
            let mut blocks = Vec::new();
            for _ in 0..cfg.num_res_blocks {
                blocks.push(ResBlock::new(ch, c_out, cfg.norm_groups, None, rng));
                ch = c_out;
            }
            let up = (i > 0).then(|| Upsample::new(ch, rng));
            levels.push(DecLevel { blocks, up });
        }
        let full_res_ch = c * cfg.channel_mult[0];
        let fusion = if mode.uses_fusion() {
            (0..cfg.num_fusion_layers)
                .map(|_| FusionBlock::new(full_res_ch, rng))
                .collect()
        } else {
            Vec::new()
        };
        let refine = match mode {
            DecoderMode::Aff | DecoderMode::AffFfl => RefineNet::Aff(
                (0..cfg.num_aff_blocks)
                    .map(|_| AffBlock::new(full_res_ch, rng))
                    .collect(),
            ),
            DecoderMode::UnetFfl => RefineNet::Plain(PlainRefine::new(full_res_ch, rng)),
            DecoderMode::Baseline | DecoderMode::Ffl => RefineNet::None,
        };
        Decoder {
            conv_in,
            mid1,
            mid2,
            levels,
            fusion,
            refine,
            out_norm: GroupNorm::new(ch, cfg.norm_groups),
            out_conv: Conv2d::new(ch, 3, 3, 1, 1, rng),
        }
    }

    fn forward(&self, z_q: &Tensor<T>, f_lr: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut x = self.conv_in.forward(z_q)?;
        x = self.mid1.forward(&x, None)?;
        x = self.mid2.forward(&x, None)?;
        for level in &self.levels {
            for block in &level.blocks {
                x = block.forward(&x, None)?;
            }
            if let Some(up) = &level.up {
                x = up.forward(&x)?;
            }
        }
        if let Some(f_lr) = f_lr {
            for fusion in &self.fusion {
                x = fusion.forward(f_lr, &x)?;
            }
        }
        x = self.refine.forward(&x)?;
        self.out_conv.forward(&self.out_norm.forward(&x)?.silu()?)
    }
}

impl<T: Scalar> ParamSet<T> for Decoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.conv_in.visit(&format!("{prefix}.conv_in"), f);
        self.mid1.visit(&format!("{prefix}.mid1"), f);
        self.mid2.visit(&format!("{prefix}.mid2"), f);
        for (i, level) in self.levels.iter().enumerate() {
            for (j, b) in level.blocks.iter().enumerate() {
                b.visit(&format!("{prefix}.level{i}.block{j}"), f);
            }
            if let Some(u) = &level.up {
                u.visit(&format!("{prefix}.level{i}.up"), f);
            }
        }
        for (i, fu) in self.fusion.iter().enumerate() {
            fu.visit(&format!("{prefix}.fusion{i}"), f);
        }
        self.refine.visit(&format!("{prefix}.refine"), f);
        self.out_norm.visit(&format!("{prefix}.out_norm"), f);
        self.out_conv.visit(&format!("{prefix}.out_conv"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv_in.visit_mut(&format!("{prefix}.conv_in"), f);
        self.mid1.visit_mut(&format!("{prefix}.mid1"), f);
        self.mid2.visit_mut(&format!("{prefix}.mid2"), f);
        for (i, level) in self.levels.iter_mut().enumerate() {
            for (j, b) in level.blocks.iter_mut().enumerate() {
                b.visit_mut(&format!("{prefix}.level{i}.block{j}"), f);
            }
            if let Some(u) = &mut level.up {
                u.visit_mut(&format!("{prefix}.level{i}.up"), f);
            }
        }
        for (i, fu) in self.fusion.iter_mut().enumerate() {
            fu.visit_mut(&format!("{prefix}.fusion{i}"), f);
        }
        self.refine.visit_mut(&format!("{prefix}.refine"), f);
        self.out_norm.visit_mut(&format!("{prefix}.out_norm"), f);
        self.out_conv.visit_mut(&format!("{prefix}.out_conv"), f);
    }
}

/// Everything a decode produces besides the image.
pub struct DecodeOutput<T: Scalar> {
    pub image: Tensor<T>,
    pub quant: QuantOutput<T>,
}

/// The full autoencoder. Encoder, quant conv, and codebook are frozen
/// at construction; the decode path is trainable.
pub struct Autoencoder<T: Scalar> {
    pub cfg: VqConfig,
    pub mode: DecoderMode,
    pub encoder: Encoder<T>,
    pub quant_conv: Conv2d<T>,
    pub codebook: Tensor<T>,
    pub post_quant_conv: Conv2d<T>,
    pub decoder: Decoder<T>,
    pub lr_extractor: Option<LrExtractor<T>>,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn new(cfg: &VqConfig, mode: DecoderMode, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut enc_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xae00_0001);
        let mut dec_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xae00_0002);
        let mut cb_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xae00_0003);

        let mut encoder = Encoder::new(cfg, &mut enc_rng);
        let mut quant_conv = Conv2d::new(cfg.z_channels, cfg.embed_dim, 1, 1, 0, &mut enc_rng);
        // Uniform codebook initialization in [-1/K, 1/K].
        let k = cfg.n_embed;
        let bound = 1.0 / k as f64;
        let cb_data: Vec<T> = (0..k * cfg.embed_dim)
            .map(|_| T::from_f64(cb_rng.gen_range(-bound..bound)))
            .collect();
        let codebook = Tensor::from_vec(cb_data, &[k, cfg.embed_dim])?;

        freeze(&mut encoder);
        freeze(&mut quant_conv);

        let post_quant_conv = Conv2d::new(cfg.embed_dim, cfg.z_channels, 1, 1, 0, &mut dec_rng);
        let decoder = Decoder::new(cfg, mode, &mut dec_rng);
        let lr_extractor = mode
            .uses_fusion()
            .then(|| LrExtractor::new(cfg.channels * cfg.channel_mult[0], cfg.norm_groups, &mut dec_rng));

        Ok(Autoencoder {
            cfg: cfg.clone(),
            mode,
            encoder,
            quant_conv,
            codebook,
            post_quant_conv,
            decoder,
            lr_extractor,
        })
    }

    /// Continuous latent of an NCHW image batch.
    pub fn encode(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        self.encoder.forward(img)
    }

    fn quantize(&self, z: &Tensor<T>) -> Result<QuantOutput<T>> {
        let z_e = self.quant_conv.forward(z)?;
        vq_quantize(&self.codebook, &z_e)
    }

    /// Decode without conditioning (the ablation baseline path).
    pub fn decode_plain(&self, z: &Tensor<T>) -> Result<DecodeOutput<T>> {
        let quant = self.quantize(z)?;
        let h = self.post_quant_conv.forward(&quant.z_q)?;
        let image = self.decoder.forward(&h, None)?;
        Ok(DecodeOutput { image, quant })
    }

    /// Decode conditioned on the low-resolution image (CHW or NCHW; any
    /// extent that divides the output extent).
    pub fn decode_conditioned(&self, z: &Tensor<T>, lr: &Tensor<T>) -> Result<DecodeOutput<T>> {
        if !self.mode.uses_fusion() {
            return self.decode_plain(z);
        }
        let (zb, _, zh, zw) = match z.shape() {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => return Err(Error::Model(format!("latent must be NCHW, got {s:?}"))),
        };
        let f = self.cfg.downsample_factor();
        let (out_h, out_w) = (zh * f, zw * f);
        let (lh, lw) = match lr.shape() {
            [b, 3, h, w] if *b == zb => (*h, *w),
            [3, h, w] if zb == 1 => (*h, *w),
            s => {
                return Err(Error::Model(format!(
                    "lr shape {s:?} inconsistent with latent batch {zb}"
                )))
            }
        };
        if out_h % lh != 0 || out_w % lw != 0 {
            return Err(Error::Model(format!(
                "lr extent {lh}x{lw} does not divide output extent {out_h}x{out_w}"
            )));
        }
        let lr_up = bicubic_resize(lr, out_h, out_w, false)?;
        let lr_up = if lr_up.shape().len() == 3 {
            lr_up.reshape(&[1, 3, out_h, out_w])?
        } else {
            lr_up
        };
        let f_lr = self
            .lr_extractor
            .as_ref()
            .expect("fusion modes build an extractor")
            .forward(&lr_up)?;
        let quant = self.quantize(z)?;
        let h = self.post_quant_conv.forward(&quant.z_q)?;
        let image = self.decoder.forward(&h, Some(&f_lr))?;
        Ok(DecodeOutput { image, quant })
    }

    /// The trainable (stage-2) portion of the model.
    pub fn trainable(&mut self) -> TrainableDecoder<'_, T> {
        TrainableDecoder { model: self }
    }
}

/// View of the autoencoder exposing only the stage-2 trainables.
pub struct TrainableDecoder<'a, T: Scalar> {
    model: &'a mut Autoencoder<T>,
}

impl<T: Scalar> ParamSet<T> for TrainableDecoder<'_, T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.model
            .post_quant_conv
            .visit(&format!("{prefix}.post_quant"), f);
        self.model.decoder.visit(&format!("{prefix}.decoder"), f);
        if let Some(ex) = &self.model.lr_extractor {
            ex.visit(&format!("{prefix}.lr_extractor"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.model
            .post_quant_conv
            .visit_mut(&format!("{prefix}.post_quant"), f);
        self.model.decoder.visit_mut(&format!("{prefix}.decoder"), f);
        if let Some(ex) = &mut self.model.lr_extractor {
            ex.visit_mut(&format!("{prefix}.lr_extractor"), f);
        }
    }
}

impl<T: Scalar> ParamSet<T> for Autoencoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.encoder.visit(&format!("{prefix}.encoder"), f);
        self.quant_conv.visit(&format!("{prefix}.quant_conv"), f);
        f(&format!("{prefix}.codebook"), &self.codebook);
        self.post_quant_conv
            .visit(&format!("{prefix}.post_quant"), f);
        self.decoder.visit(&format!("{prefix}.decoder"), f);
        if let Some(ex) = &self.lr_extractor {
            ex.visit(&format!("{prefix}.lr_extractor"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.encoder.visit_mut(&format!("{prefix}.encoder"), f);
        self.quant_conv.visit_mut(&format!("{prefix}.quant_conv"), f);
        f(&format!("{prefix}.codebook"), &mut self.codebook);
        self.post_quant_conv
            .visit_mut(&format!("{prefix}.post_quant"), f);
        self.decoder.visit_mut(&format!("{prefix}.decoder"), f);
        if let Some(ex) = &mut self.lr_extractor {
            ex.visit_mut(&format!("{prefix}.lr_extractor"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use latentsr_tensor::backward;

    pub(crate) fn tiny_cfg() -> VqConfig {
        VqConfig {
            embed_dim: 3,
            n_embed: 32,
            z_channels: 3,
            channels: 8,
            channel_mult: vec![1, 2, 4],
            num_res_blocks: 1,
            dropout: 0.0,
            num_fusion_layers: 1,
            num_aff_blocks: 1,
            ffl_lambda: 10.0,
            ffl_alpha: 1.0,
            norm_groups: 2,
        }
    }

    #[test]
    fn encode_shape_contract() {
        let ae = Autoencoder::<f32>::new(&tiny_cfg(), DecoderMode::AffFfl, 1).unwrap();
        let img = Tensor::zeros(&[1, 3, 64, 64]);
        let z = ae.encode(&img).unwrap();
        assert_eq!(z.shape(), &[1, 3, 16, 16]);
        assert!(ae.encode(&Tensor::zeros(&[1, 3, 30, 30])).is_err());
    }

    #[test]
    fn encode_is_deterministic() {
        let ae = Autoencoder::<f32>::new(&tiny_cfg(), DecoderMode::AffFfl, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = crate::schedule::randn::<f32>(&[1, 3, 32, 32], &mut rng);
        let z1 = ae.encode(&img).unwrap();
        let z2 = ae.encode(&img).unwrap();
        assert_eq!(z1.to_vec(), z2.to_vec());
    }

    #[test]
    fn latent_reacts_to_single_pixel_change() {
        let ae = Autoencoder::<f32>::new(&tiny_cfg(), DecoderMode::AffFfl, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = crate::schedule::randn::<f32>(&[1, 3, 32, 32], &mut rng);
        let mut perturbed = img.to_vec();
        perturbed[17] += 0.5;
        let img2 = Tensor::from_vec(perturbed, img.shape()).unwrap();
        let z1 = ae.encode(&img).unwrap();
        let z2 = ae.encode(&img2).unwrap();
        assert_ne!(z1.to_vec(), z2.to_vec());
    }

    #[test]
    fn decode_shape_contract() {
        let ae = Autoencoder::<f32>::new(&tiny_cfg(), DecoderMode::AffFfl, 4).unwrap();
        let z = Tensor::zeros(&[1, 3, 16, 16]);
        let lr = Tensor::zeros(&[1, 3, 16, 16]);
        let out = ae.decode_conditioned(&z, &lr).unwrap();
        assert_eq!(out.image.shape(), &[1, 3, 64, 64]);
    }

    #[test]
    fn fresh_conditioned_decode_equals_plain_decode_exactly() {
        // Zero-initialized fusion residual + identity-initialized AFF:
        // the conditioned path must reproduce the plain decode exactly.
        let ae = Autoencoder::<f32>::new(&tiny_cfg(), DecoderMode::AffFfl, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = crate::schedule::randn::<f32>(&[1, 3, 8, 8], &mut rng);
        let lr = crate::schedule::randn::<f32>(&[1, 3, 8, 8], &mut rng);
        let cond = ae.decode_conditioned(&z, &lr).unwrap();
        let plain = ae.decode_plain(&z).unwrap();
        assert_eq!(cond.image.to_vec(), plain.image.to_vec());
        assert_eq!(cond.quant.indices, plain.quant.indices);
    }

    #[test]
    fn gradients_reach_lr_extractor_and_decoder() {
        let mut ae = Autoencoder::<f32>::new(&tiny_cfg(), DecoderMode::AffFfl, 6).unwrap();
        // Nudge the fusion output conv off zero so LR features matter.
        ae.decoder.fusion[0].conv2.weight = Tensor::full(
            ae.decoder.fusion[0].conv2.weight.shape(),
            0.01,
        )
        .detach_var();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = crate::schedule::randn::<f32>(&[1, 3, 8, 8], &mut rng);
        let lr = crate::schedule::randn::<f32>(&[1, 3, 8, 8], &mut rng);
        let out = ae.decode_conditioned(&z, &lr).unwrap();
        let target = crate::schedule::randn::<f32>(&[1, 3, 32, 32], &mut rng);
        let loss = latentsr_tensor::mse(&out.image, &target).unwrap();
        let grads = backward(&loss).unwrap();

        let ex = ae.lr_extractor.as_ref().unwrap();
        let g_ex = grads.get(&ex.conv_in.weight);
        assert!(g_ex.is_some(), "lr extractor must receive gradient");
        assert!(g_ex.unwrap().data().iter().any(|&v| v != 0.0));
        let g_dec = grads.get(&ae.decoder.conv_in.weight);
        assert!(g_dec.is_some(), "decoder must receive gradient");
        assert!(g_dec.unwrap().data().iter().any(|&v| v != 0.0));
        // Frozen encoder receives none.
        assert!(grads.get(&ae.encoder.conv_in.weight).is_none());
    }

    #[test]
    fn baseline_mode_has_no_fusion_or_refine_params() {
        let ae = Autoencoder::<f32>::new(&tiny_cfg(), DecoderMode::Baseline, 7).unwrap();
        let names: Vec<String> = {
            let mut v = Vec::new();
            ae.visit("ae", &mut |n, _| v.push(n.to_string()));
            v
        };
        assert!(!names.iter().any(|n| n.contains("fusion")));
        assert!(!names.iter().any(|n| n.contains("refine.aff")));
        assert!(!names.iter().any(|n| n.contains("lr_extractor")));
    }

    #[test]
    fn mode_parsing_accepts_plus_and_underscore() {
        assert_eq!(DecoderMode::parse("aff+ffl").unwrap(), DecoderMode::AffFfl);
        assert_eq!(DecoderMode::parse("unet_ffl").unwrap(), DecoderMode::UnetFfl);
        assert!(DecoderMode::parse("nope").is_err());
    }

    #[test]
    fn nonzero_dropout_is_rejected() {
        let mut cfg = tiny_cfg();
        cfg.dropout = 0.1;
        assert!(Autoencoder::<f32>::new(&cfg, DecoderMode::Baseline, 0).is_err());
    }
}
