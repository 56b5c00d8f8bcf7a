//! Trainable network instantiated from a [`MultiBranchArch`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{BlockSpec, ConvSpec, MultiBranchArch, StageLayout};
use crate::error::{Error, Result};
use crate::ops::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, residual_add,
    BatchNormParams, BnCache, ConvCache, ConvParams, Linear, Mode,
};
use crate::tensor::Tensor;

fn build_conv(spec: &ConvSpec, rng: &mut ChaCha8Rng) -> Result<ConvParams> {
    ConvParams::init(
        spec.in_channels,
        spec.out_channels,
        spec.kernel,
        spec.stride,
        spec.padding,
        spec.groups,
        spec.bias,
        rng,
    )
}

fn add_in_place(acc: &mut Tensor, other: &Tensor) -> Result<()> {
    other.expect_shape("gradient accumulation", acc.shape())?;
    acc.data_mut()
        .iter_mut()
        .zip(other.data())
        .for_each(|(a, b)| *a += b);
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PreActBlock {
    pub bn1: BatchNormParams,
    pub conv1: ConvParams,
    pub bn2: BatchNormParams,
    pub conv2: ConvParams,
    pub shortcut: Option<ConvParams>,
}

#[derive(Debug)]
pub struct BlockCache {
    bn1: BnCache,
    pre1: Tensor,
    conv1: ConvCache,
    bn2: BnCache,
    pre2: Tensor,
    conv2: ConvCache,
    shortcut: Option<ConvCache>,
}

impl PreActBlock {
    fn new(spec: &BlockSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            bn1: BatchNormParams::new(spec.in_channels()),
            conv1: build_conv(&spec.conv1, rng)?,
            bn2: BatchNormParams::new(spec.out_channels()),
            conv2: build_conv(&spec.conv2, rng)?,
            shortcut: spec.shortcut.as_ref().map(|s| build_conv(s, rng)).transpose()?,
        })
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (pre1, bn1) = self.bn1.forward(x)?;
        let a1 = relu(&pre1);
        let (h1, conv1) = self.conv1.forward(&a1)?;
        let (pre2, bn2) = self.bn2.forward(&h1)?;
        let (h2, conv2) = self.conv2.forward(&relu(&pre2))?;
        let (out, shortcut) = match &self.shortcut {
            Some(sc) => {
                let (s, cache) = sc.forward(&a1)?;
                (residual_add(&h2, &s)?, Some(cache))
            }
            None => (residual_add(&h2, x)?, None),
        };
        Ok((
            out,
            BlockCache {
                bn1,
                pre1,
                conv1,
                bn2,
                pre2,
                conv2,
                shortcut,
            },
        ))
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let a1 = relu(&self.bn1.infer(x)?);
        let h1 = self.conv1.infer(&a1)?;
        let h2 = self.conv2.infer(&relu(&self.bn2.infer(&h1)?))?;
        match &self.shortcut {
            Some(sc) => residual_add(&h2, &sc.infer(&a1)?),
            None => residual_add(&h2, x),
        }
    }

    pub fn backward(&mut self, cache: &BlockCache, grad_out: &Tensor) -> Result<Tensor> {
        let da2 = self.conv2.backward(&cache.conv2, grad_out)?;
        let dh1 = self.bn2.backward(&cache.bn2, &relu_backward(&cache.pre2, &da2)?)?;
        let mut da1 = self.conv1.backward(&cache.conv1, &dh1)?;
        let identity_grad = match (&mut self.shortcut, &cache.shortcut) {
            (Some(sc), Some(sc_cache)) => {
                add_in_place(&mut da1, &sc.backward(sc_cache, grad_out)?)?;
                None
            }
            _ => Some(grad_out),
        };
        let mut dx = self.bn1.backward(&cache.bn1, &relu_backward(&cache.pre1, &da1)?)?;
        if let Some(g) = identity_grad {
            add_in_place(&mut dx, g)?;
        }
        Ok(dx)
    }

    fn visit<'a>(&'a mut self, params: &mut Vec<&'a mut Tensor>, buffers: &mut Vec<&'a mut Tensor>) {
        visit_bn(&mut self.bn1, params, buffers);
        visit_conv(&mut self.conv1, params);
        visit_bn(&mut self.bn2, params, buffers);
        visit_conv(&mut self.conv2, params);
        if let Some(sc) = self.shortcut.as_mut() {
            visit_conv(sc, params);
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        self.bn1.mode = mode;
        self.bn2.mode = mode;
    }
}

fn visit_conv<'a>(c: &'a mut ConvParams, params: &mut Vec<&'a mut Tensor>) {
    params.push(&mut c.weight);
    if let Some(b) = c.bias.as_mut() {
        params.push(b);
    }
}

fn visit_bn<'a>(
    bn: &'a mut BatchNormParams,
    params: &mut Vec<&'a mut Tensor>,
    buffers: &mut Vec<&'a mut Tensor>,
) {
    params.push(&mut bn.gamma);
    params.push(&mut bn.beta);
    buffers.push(&mut bn.running_mean);
    buffers.push(&mut bn.running_var);
}

fn build_blocks(stages: &[StageLayout], rng: &mut ChaCha8Rng) -> Result<Vec<PreActBlock>> {
    stages
        .iter()
        .flat_map(|s| &s.blocks)
        .map(|b| PreActBlock::new(b, rng))
        .collect()
}

/// One branch: its stages, a final norm + ReLU, global pooling and a linear head.
#[derive(Clone, Debug)]
pub struct Branch {
    pub blocks: Vec<PreActBlock>,
    pub bn: BatchNormParams,
    pub head: Linear,
}

#[derive(Debug)]
pub struct BranchCache {
    blocks: Vec<BlockCache>,
    bn: BnCache,
    pre: Tensor,
    pooled: Tensor,
}

impl Branch {
    pub fn forward(&mut self, x: &Tensor) -> Result<(Tensor, BranchCache)> {
        let mut h = x.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (out, cache) = b.forward(&h)?;
            blocks.push(cache);
            h = out;
        }
        let (pre, bn) = self.bn.forward(&h)?;
        let pooled = global_avg_pool(&relu(&pre))?;
        let logits = self.head.forward(&pooled)?;
        Ok((
            logits,
            BranchCache {
                blocks,
                bn,
                pre,
                pooled,
            },
        ))
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.infer(&h)?;
        }
        let pooled = global_avg_pool(&relu(&self.bn.infer(&h)?))?;
        self.head.forward(&pooled)
    }

    pub fn backward(&mut self, cache: &BranchCache, grad_logits: &Tensor) -> Result<Tensor> {
        let dpooled = self.head.backward(&cache.pooled, grad_logits)?;
        let dact = global_avg_pool_backward(cache.pre.shape(), &dpooled)?;
        let mut g = self.bn.backward(&cache.bn, &relu_backward(&cache.pre, &dact)?)?;
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = b.backward(c, &g)?;
        }
        Ok(g)
    }
}

/// Network parameters for a multi-branch architecture. One forward pass
/// produces the logits of every branch.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: MultiBranchArch,
    pub stem: ConvParams,
    pub trunk: Vec<PreActBlock>,
    pub branches: Vec<Branch>,
}

#[derive(Debug)]
pub struct ModelCache {
    stem: ConvCache,
    trunk: Vec<BlockCache>,
    branches: Vec<BranchCache>,
}

impl Model {
    /// Fan-in scaled Gaussian weights, unit/zero norm affine parameters.
    pub fn new(arch: &MultiBranchArch, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = build_conv(&arch.stem, &mut rng)?;
        let trunk = build_blocks(&arch.shared_trunk, &mut rng)?;
        let branches = arch
            .branches
            .iter()
            .map(|b| {
                Ok(Branch {
                    blocks: build_blocks(&b.stages, &mut rng)?,
                    bn: BatchNormParams::new(b.head_in),
                    head: Linear::init(b.head_in, b.num_classes, &mut rng),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            arch: arch.clone(),
            stem,
            trunk,
            branches,
        })
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        x.expect_ndim("model", 4)?;
        if x.shape()[1] != self.stem.in_channels() {
            let mut want = x.shape().to_vec();
            want[1] = self.stem.in_channels();
            return Err(Error::shape("model", &want, x.shape()));
        }
        Ok(())
    }

    /// Forward pass in the current norm mode, caching activations for `backward`.
    pub fn forward(&mut self, x: &Tensor) -> Result<(Vec<Tensor>, ModelCache)> {
        self.check_input(x)?;
        let (mut h, stem) = self.stem.forward(x)?;
        let mut trunk = Vec::with_capacity(self.trunk.len());
        for b in &mut self.trunk {
            let (out, cache) = b.forward(&h)?;
            trunk.push(cache);
            h = out;
        }
        let mut logits = Vec::with_capacity(self.branches.len());
        let mut branches = Vec::with_capacity(self.branches.len());
        for br in &mut self.branches {
            let (z, cache) = br.forward(&h)?;
            logits.push(z);
            branches.push(cache);
        }
        Ok((
            logits,
            ModelCache {
                stem,
                trunk,
                branches,
            },
        ))
    }

    /// Eval-mode logits of every branch; does not touch parameters or statistics.
    pub fn infer(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut h = self.stem.infer(x)?;
        for b in &self.trunk {
            h = b.infer(&h)?;
        }
        self.branches.iter().map(|br| br.infer(&h)).collect()
    }

    /// Accumulates parameter gradients given the gradient of the loss w.r.t.
    /// each branch's logits. Trunk gradients sum over branches in branch order.
    pub fn backward(&mut self, cache: &ModelCache, grad_logits: &[Tensor]) -> Result<()> {
        if grad_logits.len() != self.branches.len() {
            return Err(Error::InvalidArgument(format!(
                "{} logit gradients for {} branches",
                grad_logits.len(),
                self.branches.len()
            )));
        }
        let mut g_trunk: Option<Tensor> = None;
        for ((br, c), g) in self.branches.iter_mut().zip(&cache.branches).zip(grad_logits) {
            let gx = br.backward(c, g)?;
            match g_trunk.as_mut() {
                Some(acc) => add_in_place(acc, &gx)?,
                None => g_trunk = Some(gx),
            }
        }
        let mut g = g_trunk.expect("at least one branch");
        for (b, c) in self.trunk.iter_mut().zip(&cache.trunk).rev() {
            g = b.backward(c, &g)?;
        }
        self.stem.backward(&cache.stem, &g)?;
        Ok(())
    }

    fn visit(&mut self) -> (Vec<&mut Tensor>, Vec<&mut Tensor>) {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        visit_conv(&mut self.stem, &mut params);
        for b in &mut self.trunk {
            b.visit(&mut params, &mut buffers);
        }
        for br in &mut self.branches {
            for b in &mut br.blocks {
                b.visit(&mut params, &mut buffers);
            }
            visit_bn(&mut br.bn, &mut params, &mut buffers);
            params.push(&mut br.head.weight);
            params.push(&mut br.head.bias);
        }
        (params, buffers)
    }

    /// Trainable tensors in declaration order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.visit().0
    }

    /// Norm running statistics in declaration order.
    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        self.visit().1
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.clone().visit().0.into_iter().map(|t| t.clone()).collect()
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|t| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for b in self.trunk.iter_mut().chain(self.branches.iter_mut().flat_map(|br| br.blocks.iter_mut())) {
            b.set_mode(mode);
        }
        for br in &mut self.branches {
            br.bn.mode = mode;
        }
    }
}
