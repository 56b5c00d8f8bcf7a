//! Synthetic classification task: each class is a bright square patch at its
//! own position, observed through additive Gaussian noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    pub classes: usize,
    pub per_class: usize,
    pub image_hw: usize,
    pub channels: usize,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 500,
            image_hw: 16,
            channels: 3,
            noise_sigma: 2.0,
            seed: 0,
        }
    }
}

/// Noise-free class templates, `[classes, channels, hw, hw]`.
pub fn blob_templates(classes: usize, image_hw: usize, channels: usize) -> Result<Tensor> {
    if classes < 2 {
        return Err(Error::InvalidArgument("blobs need at least two classes".into()));
    }
    let patch = (image_hw / 4).max(1);
    let per_side = image_hw / patch;
    let cells = per_side * per_side;
    if classes > cells {
        return Err(Error::InvalidArgument(format!(
            "{classes} classes do not fit {cells} patch positions in a {image_hw}x{image_hw} image"
        )));
    }
    let plane = image_hw * image_hw;
    let mut data = vec![0.0f32; classes * channels * plane];
    for m in 0..classes {
        // Spread the classes evenly over the grid of positions.
        let cell = m * cells / classes;
        let (r0, c0) = ((cell / per_side) * patch, (cell % per_side) * patch);
        for ch in 0..channels {
            let base = (m * channels + ch) * plane;
            for r in r0..r0 + patch {
                for c in c0..c0 + patch {
                    data[base + r * image_hw + c] = 1.0;
                }
            }
        }
    }
    Tensor::new(vec![classes, channels, image_hw, image_hw], data)
}

/// `classes * per_class` samples ordered by class, fully determined by `seed`.
pub fn synthetic_blobs(cfg: &BlobsConfig) -> Result<Dataset> {
    let templates = blob_templates(cfg.classes, cfg.image_hw, cfg.channels)?;
    if cfg.per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be positive".into()));
    }
    let noise = Normal::new(0.0f32, cfg.noise_sigma.max(0.0))
        .map_err(|e| Error::InvalidArgument(format!("noise sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.channels * cfg.image_hw * cfg.image_hw;
    let n = cfg.classes * cfg.per_class;
    let mut data = Vec::with_capacity(n * size);
    let mut labels = Vec::with_capacity(n);
    for (m, t) in templates.data().chunks_exact(size).enumerate() {
        for _ in 0..cfg.per_class {
            data.extend(t.iter().map(|&v| v + noise.sample(&mut rng)));
            labels.push(m);
        }
    }
    let images = Tensor::new(vec![n, cfg.channels, cfg.image_hw, cfg.image_hw], data)?;
    Dataset::new(images, labels, cfg.classes, Split::Train)
}
