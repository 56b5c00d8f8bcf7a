//! 2-D convolution with channel groups, computed as a per-sample patch gather
//! (im2col) followed by one matrix product per group.

use rand::Rng;
use rayon::prelude::*;

use super::gemm::{gemm, Trans};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of fixed batch shards used when reducing weight gradients. Fixed so
/// the summation order does not depend on the thread pool size.
const GRAD_SHARDS: usize = 8;

#[derive(Clone, Debug)]
pub struct ConvParams {
    /// `[c_out, c_in / groups, k, k]`
    pub weight: Tensor,
    /// `[c_out]`
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

/// Values saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    in_shape: [usize; 4],
    out_hw: (usize, usize),
    cols: Vec<f32>,
}

impl ConvParams {
    pub fn new(
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        weight.expect_ndim("conv2d", 4)?;
        let s = weight.shape();
        if s[2] != s[3] {
            return Err(Error::invalid_shape("conv2d", "kernel must be square"));
        }
        if stride == 0 || groups == 0 {
            return Err(Error::InvalidArgument(
                "conv2d stride and groups must be positive".into(),
            ));
        }
        if s[0] % groups != 0 {
            return Err(Error::GroupDivisibility {
                channels: s[0],
                groups,
            });
        }
        if let Some(b) = &bias {
            b.expect_shape("conv2d bias", &[s[0]])?;
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            groups,
        })
    }

    /// Fan-in scaled Gaussian weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        for channels in [c_in, c_out] {
            if groups == 0 || channels % groups != 0 {
                return Err(Error::GroupDivisibility { channels, groups });
            }
        }
        let fan_in = c_in / groups * kernel * kernel;
        let std = (2.0 / fan_in as f32).sqrt();
        let weight = Tensor::randn(&[c_out, c_in / groups, kernel, kernel], std, rng).param();
        let bias = bias.then(|| Tensor::zeros(&[c_out]).param());
        Self::new(weight, bias, stride, padding, groups)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k {
            return Err(Error::invalid_shape(
                "conv2d",
                format!("input {h}x{w} with padding {} smaller than kernel {k}", self.padding),
            ));
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    fn check_input(&self, x: &Tensor) -> Result<[usize; 4]> {
        x.expect_ndim("conv2d", 4)?;
        let s = x.shape();
        if s[1] != self.in_channels() {
            return Err(Error::shape(
                "conv2d",
                &[s[0], self.in_channels(), s[2], s[3]],
                s,
            ));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Forward pass keeping the gathered patches for `backward`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        let (out, cols, in_shape, out_hw) = self.forward_impl(x, true)?;
        Ok((
            out,
            ConvCache {
                in_shape,
                out_hw,
                cols,
            },
        ))
    }

    /// Forward pass without saving anything for backward.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_impl(x, false)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn forward_impl(
        &self,
        x: &Tensor,
        keep_cols: bool,
    ) -> Result<(Tensor, Vec<f32>, [usize; 4], (usize, usize))> {
        let in_shape = self.check_input(x)?;
        let [n, c_in, h, w] = in_shape;
        let (ho, wo) = self.output_hw(h, w)?;
        let c_out = self.out_channels();
        let k = self.kernel();
        let plane = ho * wo;
        let rows = c_in * k * k;
        let geom = Geometry {
            c: c_in,
            h,
            w,
            k,
            stride: self.stride,
            pad: self.padding,
            ho,
            wo,
        };

        let mut out = vec![0.0f32; n * c_out * plane];
        let mut cols = if keep_cols {
            vec![0.0f32; n * rows * plane]
        } else {
            Vec::new()
        };
        let per_sample = |(x_n, out_n): (&[f32], &mut [f32]), cols_n: &mut [f32]| {
            im2col(x_n, &geom, cols_n);
            self.gemm_forward(cols_n, out_n, plane);
        };
        if keep_cols {
            x.data()
                .par_chunks(c_in * h * w)
                .zip(out.par_chunks_mut(c_out * plane))
                .zip(cols.par_chunks_mut(rows * plane))
                .for_each(|(pair, cols_n)| per_sample(pair, cols_n));
        } else {
            x.data()
                .par_chunks(c_in * h * w)
                .zip(out.par_chunks_mut(c_out * plane))
                .for_each_init(
                    || vec![0.0f32; rows * plane],
                    |scratch, pair| per_sample(pair, scratch),
                );
        }
        let out = Tensor::new(vec![n, c_out, ho, wo], out)?.finite_or("conv2d")?;
        Ok((out, cols, in_shape, (ho, wo)))
    }

    fn gemm_forward(&self, cols_n: &[f32], out_n: &mut [f32], plane: usize) {
        let g = self.groups;
        let c_out_g = self.out_channels() / g;
        let kg = self.weight.shape()[1] * self.kernel() * self.kernel();
        let wd = self.weight.data();
        for gi in 0..g {
            gemm(
                c_out_g,
                kg,
                plane,
                1.0,
                &wd[gi * c_out_g * kg..(gi + 1) * c_out_g * kg],
                Trans::No,
                &cols_n[gi * kg * plane..(gi + 1) * kg * plane],
                Trans::No,
                0.0,
                &mut out_n[gi * c_out_g * plane..(gi + 1) * c_out_g * plane],
            );
        }
        if let Some(b) = &self.bias {
            for (row, &bv) in out_n.chunks_exact_mut(plane).zip(b.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }

    /// Accumulates weight/bias gradients and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, cache: &ConvCache, grad_out: &Tensor) -> Result<Tensor> {
        let [n, c_in, h, w] = cache.in_shape;
        let (ho, wo) = cache.out_hw;
        let c_out = self.out_channels();
        grad_out.expect_shape("conv2d backward", &[n, c_out, ho, wo])?;
        if cache.cols.is_empty() {
            return Err(Error::InvalidArgument(
                "conv2d backward needs a cache from `forward`".into(),
            ));
        }
        let k = self.kernel();
        let g = self.groups;
        let plane = ho * wo;
        let rows = c_in * k * k;
        let c_out_g = c_out / g;
        let kg = rows / g;
        let dy = grad_out.data();

        if let Some(b) = self.bias.as_mut() {
            let gb = b.grad_or_init();
            for dy_n in dy.chunks_exact(c_out * plane) {
                for (gbc, row) in gb.iter_mut().zip(dy_n.chunks_exact(plane)) {
                    *gbc += row.iter().sum::<f32>();
                }
            }
        }

        // Weight gradient: fixed shards reduced in shard order.
        let shard = n.div_ceil(GRAD_SHARDS).max(1);
        let wlen = self.weight.numel();
        let partials: Vec<Vec<f32>> = (0..n.div_ceil(shard))
            .into_par_iter()
            .map(|s| {
                let mut acc = vec![0.0f32; wlen];
                for i in s * shard..((s + 1) * shard).min(n) {
                    let dy_n = &dy[i * c_out * plane..(i + 1) * c_out * plane];
                    let cols_n = &cache.cols[i * rows * plane..(i + 1) * rows * plane];
                    for gi in 0..g {
                        gemm(
                            c_out_g,
                            plane,
                            kg,
                            1.0,
                            &dy_n[gi * c_out_g * plane..(gi + 1) * c_out_g * plane],
                            Trans::No,
                            &cols_n[gi * kg * plane..(gi + 1) * kg * plane],
                            Trans::Yes,
                            1.0,
                            &mut acc[gi * c_out_g * kg..(gi + 1) * c_out_g * kg],
                        );
                    }
                }
                acc
            })
            .collect();
        let gw = self.weight.grad_or_init();
        for p in &partials {
            gw.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }

        let geom = Geometry {
            c: c_in,
            h,
            w,
            k,
            stride: self.stride,
            pad: self.padding,
            ho,
            wo,
        };
        let wd = self.weight.data();
        let mut dx = vec![0.0f32; n * c_in * h * w];
        dx.par_chunks_mut(c_in * h * w)
            .zip(dy.par_chunks(c_out * plane))
            .for_each_init(
                || vec![0.0f32; rows * plane],
                |dcols, (dx_n, dy_n)| {
                    for gi in 0..g {
                        gemm(
                            kg,
                            c_out_g,
                            plane,
                            1.0,
                            &wd[gi * c_out_g * kg..(gi + 1) * c_out_g * kg],
                            Trans::Yes,
                            &dy_n[gi * c_out_g * plane..(gi + 1) * c_out_g * plane],
                            Trans::No,
                            0.0,
                            &mut dcols[gi * kg * plane..(gi + 1) * kg * plane],
                        );
                    }
                    col2im(dcols, &geom, dx_n);
                },
            );
        Tensor::new(vec![n, c_in, h, w], dx)?.finite_or("conv2d backward")
    }
}

/// Forward-only convolution.
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    p.infer(x)
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// `x: [c, h, w]` to `cols: [c*k*k, ho*wo]`.
fn im2col(x: &[f32], g: &Geometry, cols: &mut [f32]) {
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &mut cols[((c * g.k + ki) * g.k + kj) * plane..][..plane];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &xc[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatters `cols` back onto `dx: [c, h, w]`, summing overlaps.
fn col2im(cols: &[f32], g: &Geometry, dx: &mut [f32]) {
    dx.fill(0.0);
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &cols[((c * g.k + ki) * g.k + kj) * plane..][..plane];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, &v) in row[oh * g.wo..(oh + 1) * g.wo].iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop convolution (groups = 1).
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f32> {
        let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [co, _, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0f32; n * co * ho * wo];
        for b in 0..n {
            for o in 0..co {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0f64;
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ih = (i * stride + ki) as isize - pad as isize;
                                    let iw = (j * stride + kj) as isize - pad as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((b * c + ci) * h + ih as usize) * wd + iw as usize];
                                    let wv = w.data()[((o * c + ci) * k + ki) * k + kj];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out[((b * co + o) * ho + i) * wo + j] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn dense_conv_matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(n, c, co, h, k, s, p) in &[
            (2, 3, 4, 7, 3, 1, 1),
            (1, 2, 5, 8, 3, 2, 1),
            (3, 4, 2, 5, 1, 1, 0),
            (2, 1, 3, 6, 3, 2, 0),
        ] {
            let x = Tensor::randn(&[n, c, h, h], 1.0, &mut rng);
            let conv = ConvParams::init(c, co, k, s, p, 1, false, &mut rng).unwrap();
            let y = conv2d(&x, &conv).unwrap();
            let want = naive_conv(&x, &conv.weight, s, p);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn two_group_unit_kernel_example() {
        let x = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 1, 1, 1], vec![3.0, 5.0]).unwrap();
        let conv = ConvParams::new(w, None, 1, 0, 2).unwrap();
        assert_eq!(conv2d(&x, &conv).unwrap().data(), &[3.0, 10.0]);
    }

    #[test]
    fn one_hot_unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let b = Tensor::zeros(&[3]);
        let conv = ConvParams::new(w, Some(b), 1, 0, 1).unwrap();
        assert_eq!(conv2d(&x, &conv).unwrap().data(), x.data());
    }

    #[test]
    fn rejects_group_violations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            ConvParams::init(4, 6, 3, 1, 1, 4, false, &mut rng),
            Err(Error::GroupDivisibility { channels: 6, groups: 4 })
        ));
        assert!(matches!(
            ConvParams::init(5, 6, 3, 1, 1, 2, false, &mut rng),
            Err(Error::GroupDivisibility { channels: 5, groups: 2 })
        ));
        let conv = ConvParams::init(4, 4, 3, 1, 1, 2, false, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 3, 5, 5]);
        assert!(matches!(conv2d(&x, &conv), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn output_extent_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = ConvParams::init(1, 1, 3, 2, 1, 1, false, &mut rng).unwrap();
        assert_eq!(conv.output_hw(32, 32).unwrap(), (16, 16));
        assert_eq!(conv.output_hw(7, 8).unwrap(), (4, 4));
    }

    #[test]
    fn param_count_with_groups_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = ConvParams::init(12, 6, 3, 1, 1, 3, true, &mut rng).unwrap();
        assert_eq!(conv.param_count(), 12 / 3 * 6 * 9 + 6);
    }
}
