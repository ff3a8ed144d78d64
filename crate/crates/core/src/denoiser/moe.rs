//! Multi-expert FFN layers for the denoising UNet.
//!
//! During training, the spatial tokens of each sample are randomly
//! split into N equal groups and each group is processed by its own
//! FFN expert; a momentum update pulls every expert toward the mean of
//! the others once per optimizer step. For inference the experts are
//! averaged, weight by weight, into one FFN, so the layer costs exactly
//! one FFN forward regardless of N.

use latentsr_tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Activation, GroupNorm, Linear, ParamSet};
use crate::{Error, Result};

/// One expert: a two-layer FFN.
#[derive(Clone)]
pub struct FfnExpert<T: Scalar> {
    pub w1: Linear<T>,
    pub w2: Linear<T>,
}

impl<T: Scalar> FfnExpert<T> {
    fn new(channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        FfnExpert {
            w1: Linear::new(channels, hidden, rng),
            w2: Linear::new(hidden, channels, rng),
        }
    }

    fn apply(&self, tokens: &Tensor<T>, act: Activation) -> Result<Tensor<T>> {
        let h = act.apply(&self.w1.forward(tokens)?)?;
        self.w2.forward(&h)
    }

    fn weights(&self) -> [&Tensor<T>; 4] {
        [&self.w1.weight, &self.w1.bias, &self.w2.weight, &self.w2.bias]
    }

    fn weights_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [
            &mut self.w1.weight,
            &mut self.w1.bias,
            &mut self.w2.weight,
            &mut self.w2.bias,
        ]
    }
}

impl<T: Scalar> ParamSet<T> for FfnExpert<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.w1.visit(&format!("{prefix}.w1"), f);
        self.w2.visit(&format!("{prefix}.w2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.w1.visit_mut(&format!("{prefix}.w1"), f);
        self.w2.visit_mut(&format!("{prefix}.w2"), f);
    }
}

/// FFN sublayer holding N experts (or one, once merged).
pub struct SpaceMoeLayer<T: Scalar> {
    pub norm: GroupNorm<T>,
    pub experts: Vec<FfnExpert<T>>,
    pub activation: Activation,
    pub gamma: f64,
    merged: bool,
}

impl<T: Scalar> SpaceMoeLayer<T> {
    pub fn new(
        channels: usize,
        hidden: usize,
        num_experts: usize,
        gamma: f64,
        norm_groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(num_experts >= 1, "need at least one expert");
        SpaceMoeLayer {
            norm: GroupNorm::new(channels, norm_groups),
            experts: (0..num_experts)
                .map(|_| FfnExpert::new(channels, hidden, rng))
                .collect(),
            activation: Activation::Gelu,
            gamma,
            merged: false,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn is_merged(&self) -> bool {
        self.merged || self.experts.len() == 1
    }

    /// Standalone application of expert `i` to pre-normalized tokens.
    pub fn expert_apply(&self, i: usize, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        self.experts[i].apply(tokens, self.activation)
    }

    /// Route flat tokens `[N, C]` through the experts: a random
    /// per-sample permutation splits tokens into equal groups, group i
    /// goes to expert i, and outputs return to their original slots.
    ///
    /// `batch` is the number of samples the rows belong to (rows are
    /// sample-major). Returns the routed outputs and, per row, the
    /// expert that processed it.
    pub fn route_tokens(
        &self,
        tokens: &Tensor<T>,
        batch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let (rows, channels) = match tokens.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::Model(format!(
                    "route_tokens expects [rows, channels], got {s:?}"
                )))
            }
        };
        if batch == 0 || rows % batch != 0 {
            return Err(Error::Model(format!(
                "{rows} token rows do not divide into {batch} samples"
            )));
        }
        let n = self.experts.len();
        let l = rows / batch;
        // Zero-token padding when N does not divide L; pads are dropped
        // on output and bias no expert (group sizes stay uniform).
        let padded_l = l.div_ceil(n) * n;
        let pad = padded_l - l;
        let work = if pad > 0 {
            let zeros = Tensor::zeros(&[batch * pad, channels]);
            Tensor::concat_rows(tokens, &zeros)?
        } else {
            tokens.clone()
        };
        // Row index of slot `s` (0..padded_l) of sample `b` inside `work`.
        let slot_row = |b: usize, s: usize| -> usize {
            if s < l {
                b * l + s
            } else {
                rows + b * pad + (s - l)
            }
        };
        let per_group = padded_l / n;
        let mut perms: Vec<Vec<usize>> = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut p: Vec<usize> = (0..padded_l).collect();
            p.shuffle(rng);
            perms.push(p);
        }
        // Group-major gather order: expert i sees a contiguous block.
        let mut fwd_idx = Vec::with_capacity(batch * padded_l);
        for g in 0..n {
            for (b, perm) in perms.iter().enumerate() {
                for s in &perm[g * per_group..(g + 1) * per_group] {
                    fwd_idx.push(slot_row(b, *s));
                }
            }
        }
        let grouped = work.index_select_rows(&fwd_idx)?;
        let block = batch * per_group;
        let mut outputs: Option<Tensor<T>> = None;
        for (g, expert) in self.experts.iter().enumerate() {
            let part = grouped.slice_rows(g * block, block)?;
            let processed = expert.apply(&part, self.activation)?;
            outputs = Some(match outputs {
                Some(acc) => Tensor::concat_rows(&acc, &processed)?,
                None => processed,
            });
        }
        let outputs = outputs.expect("at least one expert");
        // Invert the gather, keeping only real (non-pad) rows.
        let mut grouped_pos = vec![0usize; rows + batch * pad];
        for (pos, &row) in fwd_idx.iter().enumerate() {
            grouped_pos[row] = pos;
        }
        let inv: Vec<usize> = (0..rows).map(|r| grouped_pos[r]).collect();
        let routed = outputs.index_select_rows(&inv)?;
        let mut assignment = vec![0usize; rows];
        for (pos, &row) in fwd_idx.iter().enumerate() {
            if row < rows {
                assignment[row] = pos / block;
            }
        }
        Ok((routed, assignment))
    }

    /// Full sublayer on NCHW input: norm, FFN (routed when training,
    /// single averaged FFN when merged), residual connection.
    pub fn forward(&self, x: &Tensor<T>, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor<T>> {
        let (b, c, h, w) = match x.shape() {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => return Err(Error::Model(format!("space moe expects NCHW, got {s:?}"))),
        };
        let l = h * w;
        let tokens = self.norm.forward(x)?.nchw_to_tokens()?.reshape(&[b * l, c])?;
        let out = if self.is_merged() {
            self.experts[0].apply(&tokens, self.activation)?
        } else {
            let rng = rng.ok_or_else(|| {
                Error::Model("space moe in training mode needs an rng for token routing".into())
            })?;
            self.route_tokens(&tokens, b, rng)?.0
        };
        Ok(x.add(&out.reshape(&[b, l, c])?.tokens_to_nchw(h, w)?)?)
    }

    /// Momentum weight sharing: every expert moves toward the mean of
    /// the others, all updates computed from pre-update weights.
    ///
    /// `W_i <- gamma*W_i + (1-gamma)*mean_{j!=i}(W_j)`; the expert sum
    /// is conserved exactly in real arithmetic.
    pub fn momentum_share(&mut self) {
        let n = self.experts.len();
        if n < 2 || self.merged {
            return;
        }
        let gamma = T::from_f64(self.gamma);
        let one_minus = T::from_f64(1.0 - self.gamma);
        let inv_rest = T::from_f64(1.0 / (n - 1) as f64);
        for slot in 0..4 {
            let numel = self.experts[0].weights()[slot].numel();
            let shape = self.experts[0].weights()[slot].shape().to_vec();
            let mut sum = vec![T::zero(); numel];
            for e in &self.experts {
                for (s, &v) in sum.iter_mut().zip(e.weights()[slot].data()) {
                    *s = *s + v;
                }
            }
            let mut new_weights = Vec::with_capacity(n);
            for e in &self.experts {
                let data: Vec<T> = e.weights()[slot]
                    .data()
                    .iter()
                    .zip(&sum)
                    .map(|(&w, &s)| gamma * w + one_minus * (s - w) * inv_rest)
                    .collect();
                new_weights.push(Tensor::var(data, &shape).expect("consistent shape"));
            }
            for (e, w) in self.experts.iter_mut().zip(new_weights) {
                *e.weights_mut()[slot] = w;
            }
        }
    }

    /// Weight-space average of the experts as a single-FFN layer.
    ///
    /// Idempotent: merging a merged layer returns it unchanged.
    pub fn merged(&self) -> SpaceMoeLayer<T> {
        if self.is_merged() {
            return SpaceMoeLayer {
                norm: self.norm.clone(),
                experts: vec![self.experts[0].clone()],
                activation: self.activation,
                gamma: self.gamma,
                merged: true,
            };
        }
        let n = self.experts.len();
        let inv_n = T::from_f64(1.0 / n as f64);
        let mut merged_expert = self.experts[0].clone();
        for slot in 0..4 {
            let numel = self.experts[0].weights()[slot].numel();
            let shape = self.experts[0].weights()[slot].shape().to_vec();
            // mean = W_0 + (1/N) * sum(W_i - W_0): identical experts
            // merge to exactly W_0, with no rounding.
            let base = self.experts[0].weights()[slot].data();
            let mut delta = vec![T::zero(); numel];
            for e in &self.experts[1..] {
                for ((d, &v), &b) in delta.iter_mut().zip(e.weights()[slot].data()).zip(base) {
                    *d = *d + (v - b);
                }
            }
            let avg: Vec<T> = base
                .iter()
                .zip(&delta)
                .map(|(&b, &d)| b + d * inv_n)
                .collect();
            *merged_expert.weights_mut()[slot] =
                Tensor::var(avg, &shape).expect("consistent shape");
        }
        SpaceMoeLayer {
            norm: self.norm.clone(),
            experts: vec![merged_expert],
            activation: self.activation,
            gamma: self.gamma,
            merged: true,
        }
    }

    /// Mean absolute deviation of expert weights from their mean; the
    /// spread that momentum sharing contracts.
    pub fn expert_spread(&self) -> f64 {
        let n = self.experts.len();
        if n < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for slot in 0..4 {
            let numel = self.experts[0].weights()[slot].numel();
            let mut mean = vec![0.0f64; numel];
            for e in &self.experts {
                for (m, &v) in mean.iter_mut().zip(e.weights()[slot].data()) {
                    *m += v.to_f64();
                }
            }
            for m in &mut mean {
                *m /= n as f64;
            }
            for e in &self.experts {
                for (m, &v) in mean.iter().zip(e.weights()[slot].data()) {
                    total += (v.to_f64() - m).abs();
                    count += 1;
                }
            }
        }
        total / count as f64
    }
}

impl<T: Scalar> ParamSet<T> for SpaceMoeLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.norm.visit(&format!("{prefix}.norm"), f);
        for (i, e) in self.experts.iter().enumerate() {
            e.visit(&format!("{prefix}.expert{i}"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.norm.visit_mut(&format!("{prefix}.norm"), f);
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_mut(&format!("{prefix}.expert{i}"), f);
        }
    }
}

/// Draw a deterministic sub-rng; used to give each routed layer its own
/// stream while keeping runs reproducible.
pub fn derive_rng(rng: &mut ChaCha8Rng) -> ChaCha8Rng {
    use rand_chacha::rand_core::SeedableRng;
    ChaCha8Rng::seed_from_u64(rng.gen())
}
