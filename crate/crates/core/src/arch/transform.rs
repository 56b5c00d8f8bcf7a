//! Single-path to multi-branch transformation.
//!
//! Every stage after the shared trunk is replicated into `N` branch stages.
//! A branch with `g` groups gets `c * sqrt(g) / sqrt(N)` channels per layer
//! (rounded down, then down to a multiple of `g`), which keeps the total
//! weight count of the `N` branch layers close to the original layer's.

use serde::{Deserialize, Serialize};

use super::spec::{ArchSpec, BranchPlan};
use crate::error::{Error, Result};

/// Width of one branch layer derived from an original width `c`.
///
/// Computes `floor(c * sqrt(g / n))` exactly in integer arithmetic, then rounds
/// down to a multiple of `g` so grouped convolution can divide it.
pub fn branch_channels(c: usize, n: usize, g: usize) -> Result<usize> {
    if n == 0 || g == 0 {
        return Err(Error::InvalidArgument(
            "branch and group counts must be positive".into(),
        ));
    }
    let underflow = Error::ChannelUnderflow {
        channels: c,
        branches: n,
        groups: g,
    };
    if c < n {
        return Err(underflow);
    }
    let scaled = (c as u128 * c as u128 * g as u128) / n as u128;
    let width = scaled.isqrt() as usize;
    let width = width - width % g;
    if width < g || width == 0 {
        return Err(underflow);
    }
    Ok(width)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn params(&self) -> u64 {
        let w = (self.in_channels / self.groups) * self.out_channels * self.kernel * self.kernel;
        (w + if self.bias { self.out_channels } else { 0 }) as u64
    }

    pub fn weight_params(&self) -> u64 {
        ((self.in_channels / self.groups) * self.out_channels * self.kernel * self.kernel) as u64
    }

    pub fn output_hw(&self, hw: (usize, usize)) -> (usize, usize) {
        let f = |x: usize| (x + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(hw.0), f(hw.1))
    }
}

/// Pre-activation residual block:
/// `x -> BN -> ReLU -> conv1 -> BN -> ReLU -> conv2`, plus an identity
/// shortcut or a 1x1 projection of the pre-activated input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub shortcut: Option<ConvSpec>,
}

impl BlockSpec {
    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLayout {
    /// Index of the stage in the source architecture.
    pub stage: usize,
    pub width: usize,
    pub groups: usize,
    pub blocks: Vec<BlockSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub groups: usize,
    pub stages: Vec<StageLayout>,
    /// Classifier input width (last stage width).
    pub head_in: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiBranchArch {
    pub source: ArchSpec,
    pub plan: BranchPlan,
    pub stem: ConvSpec,
    pub shared_trunk: Vec<StageLayout>,
    pub branches: Vec<BranchSpec>,
}

impl MultiBranchArch {
    pub fn num_classes(&self) -> usize {
        self.source.num_classes
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    /// `[branch][divided stage]` channel counts.
    pub fn branch_channel_widths(&self) -> Vec<Vec<usize>> {
        self.branches
            .iter()
            .map(|b| b.stages.iter().map(|s| s.width).collect())
            .collect()
    }

    pub fn trunk_out_channels(&self) -> usize {
        self.shared_trunk
            .last()
            .map_or(self.stem.out_channels, |s| s.width)
    }

    /// Every convolution in the network: stem, trunk, then each branch.
    pub fn convs(&self) -> impl Iterator<Item = &ConvSpec> {
        fn blocks(stages: &[StageLayout]) -> Vec<&BlockSpec> {
            stages.iter().flat_map(|s| s.blocks.iter()).collect()
        }
        let mut all: Vec<&ConvSpec> = vec![&self.stem];
        for b in blocks(&self.shared_trunk)
            .into_iter()
            .chain(self.branches.iter().flat_map(|br| blocks(&br.stages)))
        {
            all.push(&b.conv1);
            all.push(&b.conv2);
            if let Some(sc) = &b.shortcut {
                all.push(sc);
            }
        }
        all.into_iter()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn build_stage(
    arch: &ArchSpec,
    stage: usize,
    in_channels: usize,
    width: usize,
    groups: usize,
) -> StageLayout {
    let k = arch.kernel;
    let conv = |cin: usize, cout: usize, stride: usize, groups: usize| ConvSpec {
        in_channels: cin,
        out_channels: cout,
        kernel: k,
        stride,
        padding: k / 2,
        groups,
        bias: false,
    };
    let blocks = (0..arch.stage_depths[stage])
        .map(|b| {
            let (cin, stride) = if b == 0 {
                (in_channels, arch.stage_stride(stage))
            } else {
                (width, 1)
            };
            // An input width inherited from a differently grouped layer may not
            // divide by `groups`; fall back to the largest common divisor.
            let g1 = gcd(groups, cin);
            let shortcut = (stride != 1 || cin != width).then_some(ConvSpec {
                in_channels: cin,
                out_channels: width,
                kernel: 1,
                stride,
                padding: 0,
                groups: 1,
                bias: false,
            });
            BlockSpec {
                conv1: conv(cin, width, stride, g1),
                conv2: conv(width, width, 1, groups),
                shortcut,
            }
        })
        .collect();
    StageLayout {
        stage,
        width,
        groups,
        blocks,
    }
}

/// Splits `arch` into the branches described by `plan`.
pub fn transform(arch: &ArchSpec, plan: &BranchPlan) -> Result<MultiBranchArch> {
    arch.validate()?;
    plan.validate(arch)?;
    let s = &arch.stem;
    let stem = ConvSpec {
        in_channels: s.in_channels,
        out_channels: s.out_channels,
        kernel: s.kernel,
        stride: s.stride,
        padding: s.padding,
        groups: 1,
        bias: false,
    };

    let mut shared_trunk = Vec::with_capacity(plan.shared_stages);
    let mut channels = stem.out_channels;
    for stage in 0..plan.shared_stages {
        let width = branch_channels(arch.stage_widths[stage], 1, plan.shared_groups)?;
        shared_trunk.push(build_stage(arch, stage, channels, width, plan.shared_groups));
        channels = width;
    }

    let n = plan.n_branches;
    let mut branches = Vec::with_capacity(n);
    for &g in &plan.branch_groups {
        let mut stages = Vec::new();
        let mut cin = channels;
        for stage in plan.shared_stages..arch.num_stages() {
            let width = branch_channels(arch.stage_widths[stage], n, g)?;
            stages.push(build_stage(arch, stage, cin, width, g));
            cin = width;
        }
        branches.push(BranchSpec {
            groups: g,
            stages,
            head_in: cin,
            num_classes: arch.num_classes,
        });
    }

    Ok(MultiBranchArch {
        source: arch.clone(),
        plan: plan.clone(),
        stem,
        shared_trunk,
        branches,
    })
}
