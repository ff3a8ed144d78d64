//! Layers shared by the denoiser and the autoencoder.
//!
//! Parameters are trainable tensor leaves; every layer exposes its
//! parameters through [`ParamSet`] with stable, path-like names, which
//! fixes both the checkpoint entry order and the optimizer state keys.

use latentsr_tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::Result;

/// Stable named access to trainable parameters.
pub trait ParamSet<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));
}

/// Collect `(name, tensor)` pairs in visit order.
pub fn named_params<T: Scalar>(set: &dyn ParamSet<T>, prefix: &str) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    set.visit(prefix, &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

/// Total number of scalar parameters.
pub fn param_count<T: Scalar>(set: &dyn ParamSet<T>) -> usize {
    let mut n = 0;
    set.visit("", &mut |_, t| n += t.numel());
    n
}

/// Turn every parameter into a plain (non-trainable) tensor.
pub fn freeze<T: Scalar>(set: &mut dyn ParamSet<T>) {
    set.visit_mut("", &mut |_, t| *t = t.detach());
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect()
}

/// Fully connected layer, weight stored `[out, in]`.
#[derive(Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            weight: Tensor::var(uniform(rng, out_dim * in_dim, bound), &[out_dim, in_dim])
                .expect("consistent shape"),
            bias: Tensor::var(uniform(rng, out_dim, bound), &[out_dim]).expect("consistent shape"),
        }
    }

    /// Output projection initialized to zero so the layer starts inert.
    pub fn new_zeroed(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[out_dim, in_dim]).detach_var(),
            bias: Tensor::zeros(&[out_dim]).detach_var(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `x` is `[N, in]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.matmul_nt(&self.weight)?.add_row_bias(&self.bias)?)
    }
}

impl<T: Scalar> ParamSet<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// 2-D convolution layer with bias.
#[derive(Clone)]
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv2d {
            weight: Tensor::var(
                uniform(rng, c_out * fan_in, bound),
                &[c_out, c_in, kernel, kernel],
            )
            .expect("consistent shape"),
            bias: Tensor::var(uniform(rng, c_out, bound), &[c_out]).expect("consistent shape"),
            stride,
            pad,
        }
    }

    pub fn new_zeroed(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            weight: Tensor::zeros(&[c_out, c_in, kernel, kernel]).detach_var(),
            bias: Tensor::zeros(&[c_out]).detach_var(),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.conv2d(&self.weight, self.stride, self.pad)?
            .add_channel_bias(&self.bias)?)
    }
}

impl<T: Scalar> ParamSet<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalization with per-channel affine parameters.
#[derive(Clone)]
pub struct GroupNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub groups: usize,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(groups >= 1 && channels % groups == 0, "norm groups must divide channels");
        GroupNorm {
            gamma: Tensor::ones(&[channels]).detach_var(),
            beta: Tensor::zeros(&[channels]).detach_var(),
            groups,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.group_norm(&self.gamma, &self.beta, self.groups, GROUP_NORM_EPS)?)
    }
}

impl<T: Scalar> ParamSet<T> for GroupNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Gelu,
    /// For tests that need the FFN to be purely linear.
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(match self {
            Activation::Silu => x.silu()?,
            Activation::Gelu => x.gelu()?,
            Activation::Identity => x.clone(),
        })
    }
}

/// Residual block: two norm+SiLU+conv stages with an optional timestep
/// embedding injected per channel after the first convolution.
pub struct ResBlock<T: Scalar> {
    pub norm1: GroupNorm<T>,
    pub conv1: Conv2d<T>,
    pub time_proj: Option<Linear<T>>,
    pub norm2: GroupNorm<T>,
    pub conv2: Conv2d<T>,
    pub skip: Option<Conv2d<T>>,
}

impl<T: Scalar> ResBlock<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        norm_groups: usize,
        emb_dim: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ResBlock {
            norm1: GroupNorm::new(c_in, norm_groups),
            conv1: Conv2d::new(c_in, c_out, 3, 1, 1, rng),
            time_proj: emb_dim.map(|d| Linear::new(d, c_out, rng)),
            norm2: GroupNorm::new(c_out, norm_groups),
            conv2: Conv2d::new(c_out, c_out, 3, 1, 1, rng),
            skip: (c_in != c_out).then(|| Conv2d::new(c_in, c_out, 1, 1, 0, rng)),
        }
    }

    /// `emb` is `[B, emb_dim]` when the block was built with one.
    pub fn forward(&self, x: &Tensor<T>, emb: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let (Some(proj), Some(emb)) = (&self.time_proj, emb) {
            let bias = proj.forward(&emb.silu()?)?;
            h = h.add_batch_channel_bias(&bias)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok(skip.add(&h)?)
    }
}

impl<T: Scalar> ParamSet<T> for ResBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.norm1.visit(&format!("{prefix}.norm1"), f);
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        if let Some(p) = &self.time_proj {
            p.visit(&format!("{prefix}.time_proj"), f);
        }
        self.norm2.visit(&format!("{prefix}.norm2"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        if let Some(s) = &self.skip {
            s.visit(&format!("{prefix}.skip"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.norm1.visit_mut(&format!("{prefix}.norm1"), f);
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        if let Some(p) = &mut self.time_proj {
            p.visit_mut(&format!("{prefix}.time_proj"), f);
        }
        self.norm2.visit_mut(&format!("{prefix}.norm2"), f);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&format!("{prefix}.skip"), f);
        }
    }
}

/// Multi-head self-attention over spatial positions, with residual.
pub struct AttentionBlock<T: Scalar> {
    pub norm: GroupNorm<T>,
    pub to_q: Linear<T>,
    pub to_k: Linear<T>,
    pub to_v: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> AttentionBlock<T> {
    pub fn new(channels: usize, head_channels: usize, norm_groups: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(
            head_channels >= 1 && channels % head_channels == 0,
            "head_channels must divide channels"
        );
        AttentionBlock {
            norm: GroupNorm::new(channels, norm_groups),
            to_q: Linear::new(channels, channels, rng),
            to_k: Linear::new(channels, channels, rng),
            to_v: Linear::new(channels, channels, rng),
            proj: Linear::new(channels, channels, rng),
            heads: channels / head_channels,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, h, w) = match x.shape() {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => return Err(crate::Error::Model(format!("attention expects NCHW, got {s:?}"))),
        };
        let l = h * w;
        let tokens = self.norm.forward(x)?.nchw_to_tokens()?;
        let flat = tokens.reshape(&[b * l, c])?;
        let q = self.to_q.forward(&flat)?.reshape(&[b, l, c])?;
        let k = self.to_k.forward(&flat)?.reshape(&[b, l, c])?;
        let v = self.to_v.forward(&flat)?.reshape(&[b, l, c])?;
        let attended = latentsr_tensor::scaled_dot_product_attention(&q, &k, &v, self.heads)?;
        let out = self.proj.forward(&attended.reshape(&[b * l, c])?)?;
        Ok(x.add(&out.reshape(&[b, l, c])?.tokens_to_nchw(h, w)?)?)
    }
}

impl<T: Scalar> ParamSet<T> for AttentionBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.norm.visit(&format!("{prefix}.norm"), f);
        self.to_q.visit(&format!("{prefix}.q"), f);
        self.to_k.visit(&format!("{prefix}.k"), f);
        self.to_v.visit(&format!("{prefix}.v"), f);
        self.proj.visit(&format!("{prefix}.proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.norm.visit_mut(&format!("{prefix}.norm"), f);
        self.to_q.visit_mut(&format!("{prefix}.q"), f);
        self.to_k.visit_mut(&format!("{prefix}.k"), f);
        self.to_v.visit_mut(&format!("{prefix}.v"), f);
        self.proj.visit_mut(&format!("{prefix}.proj"), f);
    }
}

/// Strided-conv downsample (x2).
pub struct Downsample<T: Scalar> {
    pub conv: Conv2d<T>,
}

impl<T: Scalar> Downsample<T> {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Downsample {
            conv: Conv2d::new(channels, channels, 3, 2, 1, rng),
        }
    }
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.conv.forward(x)
    }
}

impl<T: Scalar> ParamSet<T> for Downsample<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv.visit_mut(&format!("{prefix}.conv"), f);
    }
}

/// Nearest-neighbor upsample (x2) followed by a 3x3 convolution.
pub struct Upsample<T: Scalar> {
    pub conv: Conv2d<T>,
}

impl<T: Scalar> Upsample<T> {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Upsample {
            conv: Conv2d::new(channels, channels, 3, 1, 1, rng),
        }
    }
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.conv.forward(&x.upsample_nearest_2x()?)
    }
}

impl<T: Scalar> ParamSet<T> for Upsample<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv.visit_mut(&format!("{prefix}.conv"), f);
    }
}

/// Sinusoidal timestep embedding for a batch sharing one timestep.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize, batch: usize) -> Tensor<T> {
    assert!(dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let max_period = 10_000.0f64;
    let mut row = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        row.push(T::from_f64((t as f64 * freq).cos()));
    }
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        row.push(T::from_f64((t as f64 * freq).sin()));
    }
    let mut data = Vec::with_capacity(batch * dim);
    for _ in 0..batch {
        data.extend_from_slice(&row);
    }
    Tensor::from_vec(data, &[batch, dim]).expect("consistent shape")
}
