//! Binary checkpoint: `SMBGCKPT`, version, architecture hash, parameters and
//! norm buffers in declaration order, optimizer state, RNG state, train
//! counters and a CRC32 trailer. Integers and floats are little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{LossComponents, TrainState};
use crate::arch::MultiBranchArch;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::OptimizerState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SMBGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// First eight bytes of the SHA-256 of the canonical architecture JSON.
pub fn arch_hash(arch: &MultiBranchArch) -> u64 {
    let json = serde_json::to_vec(arch).expect("architecture serializes");
    let digest = Sha256::digest(&json);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensors<'a>(buf: &mut Vec<u8>, tensors: impl ExactSizeIterator<Item = &'a Tensor>) {
    put_u64(buf, tensors.len() as u64);
    for t in tensors {
        put_u64(buf, t.ndim() as u64);
        for &d in t.shape() {
            put_u64(buf, d as u64);
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn put_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    put_u64(buf, vs.len() as u64);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, model: &mut Model, state: &TrainState) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u64(&mut buf, arch_hash(&model.arch));
    put_tensors(&mut buf, model.params_mut().iter().map(|t| &**t));
    put_tensors(&mut buf, model.buffers_mut().iter().map(|t| &**t));
    let opt = &state.optimizer;
    buf.extend_from_slice(&opt.current_lr.to_le_bytes());
    buf.extend_from_slice(&opt.momentum.to_le_bytes());
    buf.extend_from_slice(&opt.weight_decay.to_le_bytes());
    put_tensors(&mut buf, opt.velocity.iter());
    // RNG state: key seed and the stream (epoch) the next epoch draws from.
    put_u64(&mut buf, state.seed);
    put_u64(&mut buf, state.epoch as u64);
    put_u64(&mut buf, state.step);
    put_f64s(&mut buf, &state.last.ce);
    put_f64s(&mut buf, &state.last.kd);
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(corrupt(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| corrupt(format!("implausible length {n}")))
    }

    fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let count = self.len()?;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let ndim = self.len()?;
            let shape = (0..ndim).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt("tensor extents overflow"))?;
            let bytes = self.take(numel.checked_mul(4).ok_or_else(|| corrupt("tensor too large"))?)?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            out.push(Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?);
        }
        Ok(out)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
}

fn restore(dst: Vec<&mut Tensor>, src: Vec<Tensor>, what: &str) -> Result<()> {
    if dst.len() != src.len() {
        return Err(corrupt(format!("{} {what} stored, model has {}", src.len(), dst.len())));
    }
    for (d, s) in dst.into_iter().zip(src) {
        if d.shape() != s.shape() {
            return Err(corrupt(format!(
                "{what} shape {:?} does not match model shape {:?}",
                s.shape(),
                d.shape()
            )));
        }
        d.data_mut().copy_from_slice(s.data());
    }
    Ok(())
}

/// Rebuilds the model for `arch` and its training state from `path`.
///
/// Checks run in order: length, magic, checksum, version, architecture hash.
pub fn load_checkpoint(path: &Path, arch: &MultiBranchArch) -> Result<(Model, TrainState)> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 + 8 + 4 {
        return Err(corrupt(format!("file of {} bytes is too short", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let mut c = Cursor { bytes: body, pos: 8 };
    let version = u32::from_le_bytes(c.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let found = c.u64()?;
    let expected = arch_hash(arch);
    if found != expected {
        return Err(Error::ArchMismatch { found, expected });
    }

    let mut model = Model::new(arch, 0)?;
    let params = c.tensors()?;
    let buffers = c.tensors()?;
    restore(model.params_mut(), params, "parameters")?;
    restore(model.buffers_mut(), buffers, "buffers")?;
    let current_lr = c.f64()?;
    let momentum = c.f32()?;
    let weight_decay = c.f32()?;
    let velocity = c.tensors()?;
    let seed = c.u64()?;
    let epoch = c.len()?;
    let step = c.u64()?;
    let ce = c.f64s()?;
    let kd = c.f64s()?;
    if c.pos != body.len() {
        return Err(corrupt("trailing bytes before checksum"));
    }
    let shapes_match = velocity.len() == model.params_mut().len()
        && velocity
            .iter()
            .zip(model.params_mut())
            .all(|(v, p)| v.shape() == p.shape());
    if !shapes_match {
        return Err(corrupt("optimizer state does not match parameters"));
    }
    let state = TrainState {
        epoch,
        step,
        optimizer: OptimizerState {
            velocity,
            momentum,
            weight_decay,
            current_lr,
        },
        seed,
        last: LossComponents { ce, kd },
    };
    Ok((model, state))
}
