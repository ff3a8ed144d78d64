//! Vector quantization with a straight-through gradient estimator.

use latentsr_tensor::{Scalar, Tensor};

use crate::{Error, Result};

/// Result of quantizing an encoder latent against the codebook.
pub struct QuantOutput<T: Scalar> {
    /// Quantized latent with straight-through gradient (same shape as
    /// the input; gradients pass to the input unchanged).
    pub z_q: Tensor<T>,
    /// Chosen codebook index per spatial position, batch-major.
    pub indices: Vec<u32>,
    /// `||sg(z) - e||^2`, the codebook update term (constant here: the
    /// codebook is frozen after initialization).
    pub codebook_loss: Tensor<T>,
    /// `||z - sg(e)||^2`, the commitment term.
    pub commitment_loss: Tensor<T>,
}

/// Map every spatial vector of `z` (`[B, D, H, W]`) to its nearest
/// codebook row (`[K, D]`) in L2; ties resolve to the lowest index.
pub fn vq_quantize<T: Scalar>(codebook: &Tensor<T>, z: &Tensor<T>) -> Result<QuantOutput<T>> {
    let (k, d) = match codebook.shape() {
        [k, d] => (*k, *d),
        s => return Err(Error::Model(format!("codebook must be [K, D], got {s:?}"))),
    };
    let (b, zd, h, w) = match z.shape() {
        [b, zd, h, w] => (*b, *zd, *h, *w),
        s => return Err(Error::Model(format!("latent must be NCHW, got {s:?}"))),
    };
    if zd != d {
        return Err(Error::Model(format!(
            "latent channels {zd} != codebook dim {d}"
        )));
    }
    let hw = h * w;
    let mut q_data = vec![T::zero(); z.numel()];
    let mut indices = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for row in 0..k {
                let mut dist = 0.0f64;
                for ch in 0..d {
                    let zi = z.data()[(bi * d + ch) * hw + p].to_f64();
                    let ci = codebook.data()[row * d + ch].to_f64();
                    let diff = zi - ci;
                    dist += diff * diff;
                }
                if dist < best_dist {
                    best_dist = dist;
                    best = row;
                }
            }
            indices.push(best as u32);
            for ch in 0..d {
                q_data[(bi * d + ch) * hw + p] = codebook.data()[best * d + ch];
            }
        }
    }
    let q = Tensor::from_vec(q_data, z.shape())?;
    // Straight-through: z_q = z + const(q - z); the backward pass sees
    // the quantization step as identity on the encoder path.
    let delta: Vec<T> = q
        .data()
        .iter()
        .zip(z.data())
        .map(|(&qv, &zv)| qv - zv)
        .collect();
    let delta = Tensor::from_vec(delta, z.shape())?;
    let z_q = z.add(&delta)?;
    let commitment_loss = latentsr_tensor::mse(z, &q)?;
    let codebook_loss = Tensor::scalar(commitment_loss.item());
    Ok(QuantOutput {
        z_q,
        indices,
        codebook_loss,
        commitment_loss,
    })
}
