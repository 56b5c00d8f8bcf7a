//! Parameter and multiply-accumulate counts.
//!
//! Convention: convolution MACs are `weight_params * H_out * W_out`, linear
//! MACs are `in * out`; normalisation, activation, pooling and residual
//! additions are not counted. Parameters include batch-norm scale and shift
//! (running statistics are buffers, not parameters).

use serde::{Deserialize, Serialize};

use super::spec::ArchSpec;
use super::transform::{BlockSpec, ConvSpec, MultiBranchArch, StageLayout};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops_mac: u64,
    pub params: u64,
}

impl CostReport {
    pub fn flops_gmac(&self) -> f64 {
        self.flops_mac as f64 / 1e9
    }

    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }
}

impl std::ops::Add for CostReport {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            flops_mac: self.flops_mac + o.flops_mac,
            params: self.params + o.params,
        }
    }
}

impl std::iter::Sum for CostReport {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Cost of one convolution given its input resolution; returns the output resolution.
pub fn conv_cost(c: &ConvSpec, hw: (usize, usize)) -> (CostReport, (usize, usize)) {
    let out = c.output_hw(hw);
    (
        CostReport {
            flops_mac: c.weight_params() * (out.0 * out.1) as u64,
            params: c.params(),
        },
        out,
    )
}

fn block_cost(b: &BlockSpec, hw: (usize, usize)) -> (CostReport, (usize, usize)) {
    let bn = |c: usize| CostReport {
        flops_mac: 0,
        params: 2 * c as u64,
    };
    let (c1, out) = conv_cost(&b.conv1, hw);
    let (c2, _) = conv_cost(&b.conv2, out);
    let sc = b.shortcut.map(|s| conv_cost(&s, hw).0).unwrap_or_default();
    (bn(b.in_channels()) + c1 + bn(b.out_channels()) + c2 + sc, out)
}

fn stages_cost(stages: &[StageLayout], mut hw: (usize, usize)) -> (CostReport, (usize, usize)) {
    let mut total = CostReport::default();
    for b in stages.iter().flat_map(|s| &s.blocks) {
        let (c, out) = block_cost(b, hw);
        total = total + c;
        hw = out;
    }
    (total, hw)
}

/// Per-part breakdown: stem plus shared trunk (counted once) and each branch
/// including its final norm and classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub trunk: CostReport,
    pub branches: Vec<CostReport>,
}

impl CostBreakdown {
    pub fn total(&self) -> CostReport {
        self.trunk + self.branches.iter().copied().sum()
    }
}

pub fn cost_breakdown(arch: &MultiBranchArch, input_hw: (usize, usize)) -> CostBreakdown {
    let (stem, hw) = conv_cost(&arch.stem, input_hw);
    let (trunk, hw) = stages_cost(&arch.shared_trunk, hw);
    let branches = arch
        .branches
        .iter()
        .map(|br| {
            let (body, _) = stages_cost(&br.stages, hw);
            let head = CostReport {
                flops_mac: (br.head_in * br.num_classes) as u64,
                params: (2 * br.head_in + br.head_in * br.num_classes + br.num_classes) as u64,
            };
            body + head
        })
        .collect();
    CostBreakdown {
        trunk: stem + trunk,
        branches,
    }
}

/// Total trainable parameters.
pub fn count_params(arch: &MultiBranchArch) -> u64 {
    // Parameter counts do not depend on resolution.
    cost_breakdown(arch, (32, 32)).total().params
}

/// MACs for one forward pass producing every branch output.
pub fn count_flops(arch: &MultiBranchArch, input_hw: (usize, usize)) -> u64 {
    cost_breakdown(arch, input_hw).total().flops_mac
}

pub fn cost_report(arch: &MultiBranchArch, input_hw: (usize, usize)) -> CostReport {
    cost_breakdown(arch, input_hw).total()
}

/// Cost of the untransformed network, walked directly from its description.
pub fn single_path_cost(arch: &ArchSpec, input_hw: (usize, usize)) -> CostReport {
    let s = &arch.stem;
    let conv = |cin: usize, cout: usize, k: usize, stride: usize, padding: usize| ConvSpec {
        in_channels: cin,
        out_channels: cout,
        kernel: k,
        stride,
        padding,
        groups: 1,
        bias: false,
    };
    let (mut total, mut hw) = conv_cost(
        &conv(s.in_channels, s.out_channels, s.kernel, s.stride, s.padding),
        input_hw,
    );
    let mut cin = s.out_channels;
    for (stage, (&width, &depth)) in arch.stage_widths.iter().zip(&arch.stage_depths).enumerate() {
        for b in 0..depth {
            let stride = if b == 0 { arch.stage_stride(stage) } else { 1 };
            let block = BlockSpec {
                conv1: conv(cin, width, arch.kernel, stride, arch.kernel / 2),
                conv2: conv(width, width, arch.kernel, 1, arch.kernel / 2),
                shortcut: (stride != 1 || cin != width).then(|| conv(cin, width, 1, stride, 0)),
            };
            let (c, out) = block_cost(&block, hw);
            total = total + c;
            hw = out;
            cin = width;
        }
    }
    let m = arch.num_classes;
    total
        + CostReport {
            flops_mac: (cin * m) as u64,
            params: (2 * cin + cin * m + m) as u64,
        }
}
