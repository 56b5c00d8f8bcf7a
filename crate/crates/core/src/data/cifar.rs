//! CIFAR-10 / CIFAR-100 binary batch files.
//!
//! CIFAR-10 records are `1 label byte + 3072 pixel bytes`, CIFAR-100 records
//! are `coarse label + fine label + 3072 pixel bytes`; pixels are stored as
//! three 32x32 planes (R, G, B), row-major.

use std::fs;
use std::path::{Path, PathBuf};

use super::{standardize, Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PIXELS: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarLayout {
    Cifar10,
    Cifar100,
}

impl CifarLayout {
    pub fn record_len(self) -> usize {
        match self {
            CifarLayout::Cifar10 => 1 + PIXELS,
            CifarLayout::Cifar100 => 2 + PIXELS,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarLayout::Cifar10 => 10,
            CifarLayout::Cifar100 => 100,
        }
    }

    fn label_offset(self) -> usize {
        match self {
            CifarLayout::Cifar10 => 0,
            // fine label
            CifarLayout::Cifar100 => 1,
        }
    }
}

/// Parses raw records into pixels scaled to `[0, 1]` and labels.
pub fn parse_cifar_records(bytes: &[u8], layout: CifarLayout, path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let rec = layout.record_len();
    let whole = bytes.len() / rec * rec;
    if whole != bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: whole as u64,
            msg: format!(
                "truncated record: {} trailing bytes, records are {rec} bytes",
                bytes.len() - whole
            ),
        });
    }
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[layout.label_offset()] as usize;
        if label >= layout.num_classes() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (i * rec + layout.label_offset()) as u64,
                msg: format!("label {label} out of range"),
            });
        }
        labels.push(label);
        let off = rec - PIXELS;
        pixels.extend(r[off..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn read_files(dir: &Path, names: &[String], layout: CifarLayout, split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in names {
        let path: PathBuf = dir.join(name);
        if !path.is_file() {
            return Err(Error::MissingFile(path));
        }
        let bytes = fs::read(&path)?;
        let (p, l) = parse_cifar_records(&bytes, layout, &path)?;
        pixels.extend(p);
        labels.extend(l);
    }
    if labels.is_empty() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            offset: 0,
            msg: "no records".into(),
        });
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, layout.num_classes(), split)
}

fn load(dir: &Path, train: &[String], test: &[String], layout: CifarLayout) -> Result<(Dataset, Dataset)> {
    let mut tr = read_files(dir, train, layout, Split::Train)?;
    let mut te = read_files(dir, test, layout, Split::Test)?;
    standardize(&mut tr, &mut [&mut te]);
    Ok((tr, te))
}

/// Reads `data_batch_{1..5}.bin` and `test_batch.bin`, standardised with train statistics.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    load(dir, &train, &["test_batch.bin".into()], CifarLayout::Cifar10)
}

/// Reads `train.bin` and `test.bin` using fine labels, standardised with train statistics.
pub fn load_cifar100(dir: &Path) -> Result<(Dataset, Dataset)> {
    load(dir, &["train.bin".into()], &["test.bin".into()], CifarLayout::Cifar100)
}
