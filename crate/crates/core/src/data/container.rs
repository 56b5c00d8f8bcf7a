//! Binary dataset container: `SMBGDATA`, version, split, class count,
//! four u64 extents, u32 labels, then f32 pixels, all little-endian.

use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SMBGDATA";
const VERSION: u32 = 1;

fn split_code(s: Split) -> u8 {
    match s {
        Split::Train => 0,
        Split::Validation => 1,
        Split::Test => 2,
    }
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + data.labels.len() * 4 + data.images.numel() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(split_code(data.split));
    buf.extend_from_slice(&(data.num_classes as u64).to_le_bytes());
    for &d in data.images.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &y in &data.labels {
        buf.extend_from_slice(&(y as u32).to_le_bytes());
    }
    for &v in data.images.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                offset: self.pos as u64,
                msg: format!("unexpected end of file, wanted {n} more bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(r.fail(0, "bad magic"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(r.fail(8, format!("unsupported version {version}")));
    }
    let split = match r.take(1)?[0] {
        0 => Split::Train,
        1 => Split::Validation,
        2 => Split::Test,
        s => return Err(r.fail(12, format!("unknown split code {s}"))),
    };
    let num_classes = r.u64()? as usize;
    let mut shape = [0usize; 4];
    for d in &mut shape {
        *d = r.u64()? as usize;
    }
    let n = shape[0];
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| r.fail(r.pos, "extents overflow"))?;
    let labels: Vec<usize> = r
        .take(n * 4)?
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    let data: Vec<f32> = r
        .take(numel * 4)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, "trailing bytes"));
    }
    Dataset::new(Tensor::new(shape.to_vec(), data)?, labels, num_classes, split)
}
