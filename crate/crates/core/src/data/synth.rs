//! Procedural training images: oriented sinusoids, filled convex
//! polygons, and noise texture over a color gradient. The mix is chosen
//! for rich high-frequency content so frequency-domain effects are
//! measurable at desk scale.

use latentsr_tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::bicubic::bicubic_resize;
use crate::Result;

/// One HR/LR training pair; `hr` extents are `lr` extents times `scale`.
#[derive(Clone)]
pub struct ImagePair {
    pub hr: Tensor<f32>,
    pub lr: Tensor<f32>,
    pub scale: usize,
}

fn sample_seed(master: u64, index: u64) -> u64 {
    // splitmix64 step keeps per-sample streams independent of n.
    let mut z = master
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn synth_hr(size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut img = vec![0.0f32; 3 * size * size];
    let plane = size * size;
    let fsize = size as f32;

    // Background: linear gradient between two random colors.
    let c0: [f32; 3] = [
        rng.gen_range(-0.8..0.8),
        rng.gen_range(-0.8..0.8),
        rng.gen_range(-0.8..0.8),
    ];
    let c1: [f32; 3] = [
        rng.gen_range(-0.8..0.8),
        rng.gen_range(-0.8..0.8),
        rng.gen_range(-0.8..0.8),
    ];
    let ang = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (ang.cos(), ang.sin());
    for y in 0..size {
        for x in 0..size {
            let t = ((x as f32 * dx + y as f32 * dy) / fsize + 1.0) / 2.0;
            for ch in 0..3 {
                img[ch * plane + y * size + x] = c0[ch] + (c1[ch] - c0[ch]) * t;
            }
        }
    }

    // Oriented sinusoids, frequencies up to near Nyquist.
    let n_waves = rng.gen_range(2..=4);
    for _ in 0..n_waves {
        let cycles = rng.gen_range(2.0..fsize / 2.5);
        let theta = rng.gen_range(0.0..std::f32::consts::TAU);
        let phase = rng.gen_range(0.0..std::f32::consts::TAU);
        let amp = rng.gen_range(0.10..0.30);
        let (kx, ky) = (
            std::f32::consts::TAU * cycles * theta.cos() / fsize,
            std::f32::consts::TAU * cycles * theta.sin() / fsize,
        );
        let weights: [f32; 3] = [rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0)];
        for y in 0..size {
            for x in 0..size {
                let s = amp * (kx * x as f32 + ky * y as f32 + phase).sin();
                for ch in 0..3 {
                    img[ch * plane + y * size + x] += weights[ch] * s;
                }
            }
        }
    }

    // Filled convex polygons: hard edges for broadband content.
    let n_polys = rng.gen_range(1..=3);
    for _ in 0..n_polys {
        let cx = rng.gen_range(0.2 * fsize..0.8 * fsize);
        let cy = rng.gen_range(0.2 * fsize..0.8 * fsize);
        let radius = rng.gen_range(0.1 * fsize..0.35 * fsize);
        let sides = rng.gen_range(3..=6);
        let rot = rng.gen_range(0.0..std::f32::consts::TAU);
        let verts: Vec<(f32, f32)> = (0..sides)
            .map(|i| {
                let a = rot + std::f32::consts::TAU * i as f32 / sides as f32;
                let r = radius * rng.gen_range(0.7..1.0);
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        let color: [f32; 3] = [
            rng.gen_range(-0.9..0.9),
            rng.gen_range(-0.9..0.9),
            rng.gen_range(-0.9..0.9),
        ];
        let inside = |px: f32, py: f32| -> bool {
            // Convex by construction (vertices sorted by angle): the
            // point must be on the same side of every edge.
            let mut sign = 0.0f32;
            for i in 0..verts.len() {
                let (x1, y1) = verts[i];
                let (x2, y2) = verts[(i + 1) % verts.len()];
                let cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
                if cross.abs() < 1e-9 {
                    continue;
                }
                if sign == 0.0 {
                    sign = cross.signum();
                } else if cross.signum() != sign {
                    return false;
                }
            }
            true
        };
        for y in 0..size {
            for x in 0..size {
                if inside(x as f32, y as f32) {
                    for ch in 0..3 {
                        img[ch * plane + y * size + x] =
                            0.35 * img[ch * plane + y * size + x] + 0.65 * color[ch];
                    }
                }
            }
        }
    }

    // Noise texture.
    let noise_amp = rng.gen_range(0.03..0.08);
    for v in &mut img {
        *v += noise_amp * rng.gen_range(-1.0f32..1.0);
    }

    for v in &mut img {
        *v = v.clamp(-1.0, 1.0);
    }
    img
}

/// One deterministic sample; `index` selects the per-sample stream, so
/// samples can be produced in any order (or in parallel) identically.
pub fn make_pair(hr_size: usize, scale: usize, seed: u64, index: usize) -> Result<ImagePair> {
    if scale == 0 || hr_size % scale != 0 {
        return Err(crate::Error::Data(format!(
            "hr_size {hr_size} not divisible by scale {scale}"
        )));
    }
    let lr_size = hr_size / scale;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, index as u64));
    let hr = Tensor::from_vec(synth_hr(hr_size, &mut rng), &[3, hr_size, hr_size])
        .expect("consistent shape");
    let lr = bicubic_resize(&hr, lr_size, lr_size, true)?;
    Ok(ImagePair { hr, lr, scale })
}

/// Deterministic synthetic dataset; `hr_size` must be divisible by
/// `scale`. The LR image is the antialiased bicubic downscale.
pub fn make_synthetic_dataset(
    n: usize,
    hr_size: usize,
    scale: usize,
    seed: u64,
) -> Result<Vec<ImagePair>> {
    (0..n).map(|i| make_pair(hr_size, scale, seed, i)).collect()
}
