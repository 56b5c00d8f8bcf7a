//! Datasets, loaders, augmentation and deterministic batching.

mod augment;
mod blobs;
mod cifar;
mod container;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, batches, epoch_rng, AugmentConfig, AugmentDraw};
pub use blobs::{blob_templates, synthetic_blobs, BlobsConfig};
pub use cifar::{load_cifar10, load_cifar100, parse_cifar_records, CifarLayout};
pub use container::{read_dataset, write_dataset};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[S, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        images.expect_ndim("dataset", 4)?;
        if images.shape()[0] != labels.len() {
            return Err(Error::shape("dataset", &[labels.len()], &images.shape()[..1]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Images and labels for the given sample indices.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Self {
        let (images, labels) = self.gather(indices);
        Self {
            images,
            labels,
            num_classes: self.num_classes,
            split,
        }
    }

    /// Seeded hold-out: `fraction` of the samples become a validation split.
    pub fn holdout(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!(
                "hold-out fraction must be in [0, 1), got {fraction}"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((self.len() as f64) * fraction).round() as usize;
        if n_val == 0 || n_val == self.len() {
            return Err(Error::InvalidArgument(format!(
                "hold-out of {fraction} leaves an empty split of {} samples",
                self.len()
            )));
        }
        let (val, train) = order.split_at(n_val);
        let (mut train, mut val) = (train.to_vec(), val.to_vec());
        train.sort_unstable();
        val.sort_unstable();
        Ok((self.subset(&train, Split::Train), self.subset(&val, Split::Validation)))
    }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    pub fn from_dataset(data: &Dataset) -> Self {
        let [c, h, w] = data.image_shape();
        let plane = h * w;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, chunk) in data.images.data().chunks_exact(plane).enumerate() {
            let ch = i % c;
            for &v in chunk {
                mean[ch] += v as f64;
                sq[ch] += v as f64 * v as f64;
            }
        }
        let count = (data.len() * plane) as f64;
        let (mean, std) = mean
            .iter()
            .zip(&sq)
            .map(|(&s, &q)| {
                let m = s / count;
                let var = (q / count - m * m).max(0.0);
                (m as f32, var.sqrt().max(1e-8) as f32)
            })
            .unzip();
        Self { mean, std }
    }

    pub fn apply(&self, data: &mut Dataset) {
        let [c, h, w] = data.image_shape();
        let plane = h * w;
        for (i, chunk) in data.images.data_mut().chunks_exact_mut(plane).enumerate() {
            let ch = i % c;
            let (m, s) = (self.mean[ch], self.std[ch]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }
}

/// Standardises both splits with statistics of `train` only.
pub fn standardize(train: &mut Dataset, others: &mut [&mut Dataset]) -> ChannelStats {
    let stats = ChannelStats::from_dataset(train);
    stats.apply(train);
    for d in others {
        stats.apply(d);
    }
    stats
}
