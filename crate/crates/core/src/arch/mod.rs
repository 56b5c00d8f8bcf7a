//! Architecture description, the multi-branch transformation and its cost model.

mod cost;
mod report;
mod spec;
mod transform;

pub use cost::{
    conv_cost, cost_breakdown, cost_report, count_flops, count_params, single_path_cost,
    CostBreakdown, CostReport,
};
pub use report::{emit_report, ArchReport, BranchReport, StageReport, Table1Row};
pub use spec::{parse_arch_spec, ArchSpec, BlockStyle, BranchPlan, Family, StemSpec};
pub use transform::{
    branch_channels, transform, BlockSpec, BranchSpec, ConvSpec, MultiBranchArch, StageLayout,
};
