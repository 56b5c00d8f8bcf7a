use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Pad-and-crop plus horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub pad: usize,
    pub hflip: bool,
}

impl AugmentConfig {
    pub const OFF: Self = Self {
        enabled: false,
        pad: 0,
        hflip: false,
    };

    pub const CIFAR: Self = Self {
        enabled: true,
        pad: 4,
        hflip: true,
    };
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::OFF
    }
}

/// Random choices for one sample: crop offset into the padded image and flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentDraw {
    pub fn sample<R: Rng + ?Sized>(pad: usize, hflip: bool, rng: &mut R) -> Self {
        Self {
            dy: rng.random_range(0..=2 * pad),
            dx: rng.random_range(0..=2 * pad),
            flip: hflip && rng.random_bool(0.5),
        }
    }

    /// Applies the draw to one `[c, h, w]` image.
    pub fn apply(&self, img: &[f32], c: usize, h: usize, w: usize, pad: usize, out: &mut [f32]) {
        for ch in 0..c {
            let src = &img[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * h * w..(ch + 1) * h * w];
            for i in 0..h {
                let si = (i + self.dy) as isize - pad as isize;
                for j in 0..w {
                    let jj = if self.flip { w - 1 - j } else { j };
                    let sj = (jj + self.dx) as isize - pad as isize;
                    dst[i * w + j] = if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                        0.0
                    } else {
                        src[si as usize * w + sj as usize]
                    };
                }
            }
        }
    }
}

/// Zero-pads by `pad`, randomly crops back to the original size and flips
/// horizontally with probability 0.5 when `hflip` is set.
pub fn augment<R: Rng + ?Sized>(batch: &Tensor, pad: usize, hflip: bool, rng: &mut R) -> Tensor {
    let s = batch.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let size = c * h * w;
    let mut out = batch.clone();
    for (src, dst) in batch.data().chunks_exact(size).zip(out.data_mut().chunks_exact_mut(size)) {
        AugmentDraw::sample(pad, hflip, rng).apply(src, c, h, w, pad, dst);
    }
    out
}

/// Generator for epoch `epoch`: the base seed selects the key, the epoch the stream.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Shuffled index batches for one epoch; the final short batch is kept.
pub fn batches(n_samples: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..n_samples).collect();
    // Shuffle stream kept apart from the augmentation stream of the same epoch.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_5546_464c_4521);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
