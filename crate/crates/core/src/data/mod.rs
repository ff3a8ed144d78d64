//! Dataset synthesis, bicubic degradation, persistence formats, and
//! image I/O.

pub mod archive;
pub mod bicubic;
pub mod ppm;
pub mod synth;

pub use archive::{ArchiveData, ArchiveEntry, TensorArchive};
pub use bicubic::bicubic_resize;
pub use ppm::{load_ppm, save_ppm};
pub use synth::{make_synthetic_dataset, ImagePair};

use latentsr_tensor::Tensor;

/// A degraded input together with the latent a trained sampler produced
/// for it; the training set of the decoder stage.
#[derive(Clone)]
pub struct LrLatentPair {
    pub lr: Tensor<f32>,
    pub latent: Tensor<f32>,
}

/// Persist generated pairs as an archive.
pub fn save_pairs(path: &std::path::Path, pairs: &[LrLatentPair]) -> crate::Result<()> {
    let mut arc = TensorArchive::new();
    arc.set_meta("kind", "lr_latent_pairs");
    arc.set_meta("count", &pairs.len().to_string());
    for (i, p) in pairs.iter().enumerate() {
        arc.push_tensor(&format!("pair{i:05}.lr"), &p.lr);
        arc.push_tensor(&format!("pair{i:05}.latent"), &p.latent);
    }
    arc.write_to(path)
}

pub fn load_pairs(path: &std::path::Path) -> crate::Result<Vec<LrLatentPair>> {
    let arc = TensorArchive::read_from(path)?;
    let count: usize = arc
        .get_meta("count")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| crate::Error::Archive("pair archive missing count".into()))?;
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        pairs.push(LrLatentPair {
            lr: arc.tensor_f32(&format!("pair{i:05}.lr"))?,
            latent: arc.tensor_f32(&format!("pair{i:05}.latent"))?,
        });
    }
    Ok(pairs)
}
