use serde::{Deserialize, Serialize};

use super::cost::{cost_breakdown, CostReport};
use super::transform::MultiBranchArch;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub width: usize,
    pub groups: usize,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchReport {
    pub index: usize,
    pub groups: usize,
    pub stages: Vec<StageReport>,
    pub cost: CostReport,
}

/// Row in the layout of the cost columns of a results table; accuracy is
/// filled in by evaluation, never by the architecture report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub acc: Option<f64>,
    pub flops_gmac: f64,
    pub params_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchReport {
    pub plan: String,
    pub n_branches: usize,
    pub input_hw: (usize, usize),
    pub stem_channels: usize,
    pub shared_stages: Vec<StageReport>,
    pub branches: Vec<BranchReport>,
    pub shared_cost: CostReport,
    pub cost: CostReport,
    pub table1_row: Table1Row,
}

fn stage_reports(stages: &[super::transform::StageLayout]) -> Vec<StageReport> {
    stages
        .iter()
        .map(|s| StageReport {
            stage: s.stage,
            width: s.width,
            groups: s.groups,
            depth: s.blocks.len(),
        })
        .collect()
}

pub fn emit_report(arch: &MultiBranchArch, input_hw: (usize, usize)) -> ArchReport {
    let breakdown = cost_breakdown(arch, input_hw);
    let cost = breakdown.total();
    ArchReport {
        plan: arch.plan.to_string(),
        n_branches: arch.n_branches(),
        input_hw,
        stem_channels: arch.stem.out_channels,
        shared_stages: stage_reports(&arch.shared_trunk),
        branches: arch
            .branches
            .iter()
            .zip(&breakdown.branches)
            .enumerate()
            .map(|(index, (b, &cost))| BranchReport {
                index,
                groups: b.groups,
                stages: stage_reports(&b.stages),
                cost,
            })
            .collect(),
        shared_cost: breakdown.trunk,
        cost,
        table1_row: Table1Row {
            acc: None,
            flops_gmac: cost.flops_gmac(),
            params_m: cost.params_m(),
        },
    }
}

impl ArchReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
