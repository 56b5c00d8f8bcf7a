use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch normalisation over `[N, C, H, W]`.
#[derive(Clone, Debug)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f32,
    pub momentum: f32,
    pub mode: Mode,
}

#[derive(Clone, Debug)]
pub struct BnCache {
    shape: [usize; 4],
    mode: Mode,
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

impl BatchNormParams {
    pub const DEFAULT_EPSILON: f32 = 1e-5;
    pub const DEFAULT_MOMENTUM: f32 = 0.1;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0).param(),
            beta: Tensor::zeros(&[channels]).param(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            epsilon: Self::DEFAULT_EPSILON,
            momentum: Self::DEFAULT_MOMENTUM,
            mode: Mode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn check(&self, x: &Tensor) -> Result<[usize; 4]> {
        x.expect_ndim("batchnorm2d", 4)?;
        let s = x.shape();
        if s[1] != self.channels() {
            return Err(Error::shape(
                "batchnorm2d",
                &[s[0], self.channels(), s[2], s[3]],
                s,
            ));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Forward pass in `self.mode`. Train mode normalises with batch statistics
    /// and folds them into the running estimates.
    pub fn forward(&mut self, x: &Tensor) -> Result<(Tensor, BnCache)> {
        let shape = self.check(x)?;
        let [n, c, h, w] = shape;
        let plane = h * w;
        let count = n * plane;
        let (mean, inv_std) = match self.mode {
            Mode::Eval => self.running_inv_std(),
            Mode::Train => {
                if count < 2 {
                    return Err(Error::DegenerateStatistics {
                        op: "batchnorm2d",
                        msg: "train mode needs more than one value per channel".into(),
                    });
                }
                let mut mean = vec![0.0f32; c];
                let mut inv_std = vec![0.0f32; c];
                let m = self.momentum as f64;
                for ch in 0..c {
                    let (mu, var) = channel_moments(x.data(), n, c, plane, ch);
                    mean[ch] = mu as f32;
                    inv_std[ch] = (1.0 / (var + self.epsilon as f64).sqrt()) as f32;
                    let unbiased = var * count as f64 / (count - 1) as f64;
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = ((1.0 - m) * *rm as f64 + m * mu) as f32;
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = ((1.0 - m) * *rv as f64 + m * unbiased) as f32;
                }
                (mean, inv_std)
            }
        };
        let xhat = normalise(x.data(), c, plane, &mean, &inv_std);
        let out = self.affine(&xhat, c, plane);
        let out = Tensor::new(shape.to_vec(), out)?.finite_or("batchnorm2d")?;
        Ok((
            out,
            BnCache {
                shape,
                mode: self.mode,
                xhat,
                inv_std,
            },
        ))
    }

    /// Eval-mode forward using running statistics only.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let shape = self.check(x)?;
        let [_, c, h, w] = shape;
        let (mean, inv_std) = self.running_inv_std();
        let xhat = normalise(x.data(), c, h * w, &mean, &inv_std);
        Tensor::new(shape.to_vec(), self.affine(&xhat, c, h * w))?.finite_or("batchnorm2d")
    }

    fn running_inv_std(&self) -> (Vec<f32>, Vec<f32>) {
        let inv_std = self
            .running_var
            .data()
            .iter()
            .map(|&v| (1.0 / (v as f64 + self.epsilon as f64).sqrt()) as f32)
            .collect();
        (self.running_mean.data().to_vec(), inv_std)
    }

    fn affine(&self, xhat: &[f32], c: usize, plane: usize) -> Vec<f32> {
        let (g, b) = (self.gamma.data(), self.beta.data());
        let mut out = Vec::with_capacity(xhat.len());
        for (i, chunk) in xhat.chunks_exact(plane).enumerate() {
            let ch = i % c;
            out.extend(chunk.iter().map(|&v| g[ch] * v + b[ch]));
        }
        out
    }

    /// Accumulates gamma/beta gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &BnCache, grad_out: &Tensor) -> Result<Tensor> {
        grad_out.expect_shape("batchnorm2d backward", &cache.shape)?;
        let [n, c, h, w] = cache.shape;
        let plane = h * w;
        let count = (n * plane) as f64;
        let dy = grad_out.data();

        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for (i, (dy_p, xh_p)) in dy
            .chunks_exact(plane)
            .zip(cache.xhat.chunks_exact(plane))
            .enumerate()
        {
            let ch = i % c;
            for (&d, &xh) in dy_p.iter().zip(xh_p) {
                sum_dy[ch] += d as f64;
                sum_dy_xhat[ch] += d as f64 * xh as f64;
            }
        }
        {
            let gg = self.gamma.grad_or_init();
            for (g, s) in gg.iter_mut().zip(&sum_dy_xhat) {
                *g += *s as f32;
            }
        }
        {
            let gb = self.beta.grad_or_init();
            for (g, s) in gb.iter_mut().zip(&sum_dy) {
                *g += *s as f32;
            }
        }

        let gamma = self.gamma.data();
        let mut dx = Vec::with_capacity(dy.len());
        for (i, (dy_p, xh_p)) in dy
            .chunks_exact(plane)
            .zip(cache.xhat.chunks_exact(plane))
            .enumerate()
        {
            let ch = i % c;
            let scale = gamma[ch] as f64 * cache.inv_std[ch] as f64;
            match cache.mode {
                Mode::Eval => dx.extend(dy_p.iter().map(|&d| (d as f64 * scale) as f32)),
                Mode::Train => {
                    let mean_dy = sum_dy[ch] / count;
                    let mean_dy_xhat = sum_dy_xhat[ch] / count;
                    dx.extend(dy_p.iter().zip(xh_p).map(|(&d, &xh)| {
                        (scale * (d as f64 - mean_dy - xh as f64 * mean_dy_xhat)) as f32
                    }));
                }
            }
        }
        Tensor::new(cache.shape.to_vec(), dx)?.finite_or("batchnorm2d backward")
    }
}

fn channel_moments(x: &[f32], n: usize, c: usize, plane: usize, ch: usize) -> (f64, f64) {
    let count = (n * plane) as f64;
    let slices = || (0..n).map(move |b| &x[(b * c + ch) * plane..(b * c + ch + 1) * plane]);
    let mean = slices().flatten().map(|&v| v as f64).sum::<f64>() / count;
    let var = slices()
        .flatten()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / count;
    (mean, var)
}

fn normalise(x: &[f32], c: usize, plane: usize, mean: &[f32], inv_std: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for (i, chunk) in x.chunks_exact(plane).enumerate() {
        let ch = i % c;
        out.extend(chunk.iter().map(|&v| (v - mean[ch]) * inv_std[ch]));
    }
    out
}
