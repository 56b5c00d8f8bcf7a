use rand::Rng;

use super::gemm::{gemm, Trans};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient of `relu` given its input.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.expect_shape("relu backward", x.shape())?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// `[N, C, H, W] -> [N, C]`
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    x.expect_ndim("global_avg_pool", 4)?;
    let s = x.shape();
    let plane = s[2] * s[3];
    let data = x
        .data()
        .chunks_exact(plane)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();
    Tensor::new(vec![s[0], s[1]], data)
}

pub fn global_avg_pool_backward(in_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    grad_out.expect_shape("global_avg_pool backward", &in_shape[..2])?;
    let plane = in_shape[2] * in_shape[3];
    let scale = 1.0 / plane as f32;
    let mut data = Vec::with_capacity(grad_out.numel() * plane);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * scale, plane));
    }
    Tensor::new(in_shape.to_vec(), data)
}

pub fn residual_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    b.expect_shape("residual_add", a.shape())?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)?.finite_or("residual_add")
}

/// Fully connected layer `y = x W^T + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        weight.expect_ndim("linear", 2)?;
        bias.expect_shape("linear bias", &weight.shape()[..1])?;
        Ok(Self { weight, bias })
    }

    pub fn init<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let std = (2.0 / in_features as f32).sqrt();
        Self {
            weight: Tensor::randn(&[out_features, in_features], std, rng).param(),
            bias: Tensor::zeros(&[out_features]).param(),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_ndim("linear", 2)?;
        let (n, d) = (x.shape()[0], x.shape()[1]);
        if d != self.in_features() {
            return Err(Error::shape("linear", &[n, self.in_features()], x.shape()));
        }
        let m = self.out_features();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.bias.data());
        }
        gemm(n, d, m, 1.0, x.data(), Trans::No, self.weight.data(), Trans::Yes, 1.0, &mut out);
        Tensor::new(vec![n, m], out)?.finite_or("linear")
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let (n, d, m) = (x.shape()[0], self.in_features(), self.out_features());
        grad_out.expect_shape("linear backward", &[n, m])?;
        gemm(
            m,
            n,
            d,
            1.0,
            grad_out.data(),
            Trans::Yes,
            x.data(),
            Trans::No,
            1.0,
            self.weight.grad_or_init(),
        );
        let gb = self.bias.grad_or_init();
        for row in grad_out.rows() {
            gb.iter_mut().zip(row).for_each(|(g, &v)| *g += v);
        }
        let mut dx = vec![0.0f32; n * d];
        gemm(n, m, d, 1.0, grad_out.data(), Trans::No, self.weight.data(), Trans::No, 0.0, &mut dx);
        Tensor::new(vec![n, d], dx)
    }
}
