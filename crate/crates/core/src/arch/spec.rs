use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    #[serde(rename = "resnet")]
    ResNet,
    #[serde(rename = "wideresnet")]
    WideResNet,
}

impl Family {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "resnet" => Some(Family::ResNet),
            "wideresnet" => Some(Family::WideResNet),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockStyle {
    PreActivationResidual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Single-path CNN description: a stem convolution followed by stages of
/// pre-activation residual blocks and a pooled linear classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub family: Family,
    pub stage_widths: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub kernel: usize,
    pub num_classes: usize,
    pub stem: StemSpec,
    pub block_style: BlockStyle,
}

impl ArchSpec {
    /// CIFAR Wide-ResNet `depth`-`widen`: three stages of `(depth - 4) / 6` blocks.
    pub fn wide_resnet(depth: usize, widen: usize, num_classes: usize) -> Result<Self> {
        if depth < 10 || (depth - 4) % 6 != 0 || widen == 0 {
            return Err(Error::InvalidArch(format!(
                "wide resnet depth must be 6n+4 (n >= 1), got {depth} with widening {widen}"
            )));
        }
        let n = (depth - 4) / 6;
        let spec = Self {
            family: Family::WideResNet,
            stage_widths: [16, 32, 64].iter().map(|w| w * widen).collect(),
            stage_depths: vec![n; 3],
            kernel: 3,
            num_classes,
            stem: StemSpec {
                in_channels: 3,
                out_channels: 16,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            block_style: BlockStyle::PreActivationResidual,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// CIFAR pre-activation ResNet-18/34.
    pub fn resnet(depth: usize, num_classes: usize) -> Result<Self> {
        let depths = match depth {
            18 => vec![2, 2, 2, 2],
            34 => vec![3, 4, 6, 3],
            _ => {
                return Err(Error::InvalidArch(format!(
                    "unsupported resnet depth {depth} (basic-block variants 18 and 34)"
                )))
            }
        };
        let spec = Self {
            family: Family::ResNet,
            stage_widths: vec![64, 128, 256, 512],
            stage_depths: depths,
            kernel: 3,
            num_classes,
            stem: StemSpec {
                in_channels: 3,
                out_channels: 64,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            block_style: BlockStyle::PreActivationResidual,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Small residual network for desk-scale experiments.
    pub fn toy(
        in_channels: usize,
        stage_widths: Vec<usize>,
        stage_depths: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let stem_width = stage_widths.first().copied().unwrap_or(0);
        let spec = Self {
            family: Family::ResNet,
            stage_widths,
            stage_depths,
            kernel: 3,
            num_classes,
            stem: StemSpec {
                in_channels,
                out_channels: stem_width,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            block_style: BlockStyle::PreActivationResidual,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn num_stages(&self) -> usize {
        self.stage_widths.len()
    }

    /// First stage keeps resolution, every later stage halves it.
    pub fn stage_stride(&self, stage: usize) -> usize {
        if stage == 0 {
            1
        } else {
            2
        }
    }

    /// Leading stages kept shared when splitting into branches: two for
    /// four-stage families, one otherwise.
    pub fn default_shared_stages(&self) -> usize {
        if self.num_stages() >= 4 {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArch(msg));
        if self.stage_widths.len() < 2 {
            return bad(format!(
                "need at least two stages, got {}",
                self.stage_widths.len()
            ));
        }
        if self.stage_widths.len() != self.stage_depths.len() {
            return bad("stage_widths and stage_depths differ in length".into());
        }
        if self.stage_widths.iter().chain(&self.stage_depths).any(|&v| v == 0) {
            return bad("stage widths and depths must be positive".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        let s = &self.stem;
        if s.in_channels == 0 || s.out_channels == 0 || s.kernel == 0 || s.stride == 0 {
            return bad("stem extents must be positive".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Parses a JSON architecture description.
pub fn parse_arch_spec(text: &str) -> Result<ArchSpec> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        field: "<document>".into(),
        msg: e.to_string(),
    })?;
    match value.get("family") {
        None => {
            return Err(Error::Parse {
                field: "family".into(),
                msg: "missing".into(),
            })
        }
        Some(serde_json::Value::String(s)) if Family::parse(s).is_none() => {
            return Err(Error::Parse {
                field: "family".into(),
                msg: format!("unknown family `{s}` (expected `resnet` or `wideresnet`)"),
            })
        }
        _ => {}
    }
    let spec: ArchSpec = serde_json::from_value(value).map_err(|e| Error::Parse {
        field: field_of(&e.to_string()),
        msg: e.to_string(),
    })?;
    spec.validate()?;
    Ok(spec)
}

/// Best-effort extraction of the offending field name from a serde message.
fn field_of(msg: &str) -> String {
    msg.split('`')
        .nth(1)
        .map(str::to_owned)
        .unwrap_or_else(|| "<document>".into())
}

/// How a single-path network is split: `n_branches` branches after
/// `shared_stages` shared stages, with the shared trunk using
/// `shared_groups` groups and branch `i` using `branch_groups[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchPlan {
    pub n_branches: usize,
    pub shared_stages: usize,
    pub shared_groups: usize,
    pub branch_groups: Vec<usize>,
}

impl BranchPlan {
    /// Three branches with 1, 2 and 3 groups and an ungrouped shared trunk.
    pub fn default_for(arch: &ArchSpec) -> Self {
        Self {
            n_branches: 3,
            shared_stages: arch.default_shared_stages(),
            shared_groups: 1,
            branch_groups: vec![1, 2, 3],
        }
    }

    /// The unsplit network.
    pub fn single(arch: &ArchSpec) -> Self {
        Self {
            n_branches: 1,
            shared_stages: arch.default_shared_stages(),
            shared_groups: 1,
            branch_groups: vec![1],
        }
    }

    pub fn with_groups(arch: &ArchSpec, shared_groups: usize, branch_groups: Vec<usize>) -> Self {
        Self {
            n_branches: branch_groups.len(),
            shared_stages: arch.default_shared_stages(),
            shared_groups,
            branch_groups,
        }
    }

    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidPlan(msg));
        if self.n_branches == 0 {
            return bad("need at least one branch".into());
        }
        if self.branch_groups.len() != self.n_branches {
            return bad(format!(
                "{} group counts for {} branches",
                self.branch_groups.len(),
                self.n_branches
            ));
        }
        if self.shared_groups == 0 || self.branch_groups.contains(&0) {
            return bad("group counts must be positive".into());
        }
        if self.shared_stages >= arch.num_stages() {
            return bad(format!(
                "{} shared stages leave nothing to split in a {}-stage network",
                self.shared_stages,
                arch.num_stages()
            ));
        }
        Ok(())
    }

    /// Parses the `[a,(b,c,...)]` group-assignment notation; shared stage
    /// count follows the architecture default.
    pub fn parse_notation(text: &str, arch: &ArchSpec) -> Result<Self> {
        let err = || Error::Parse {
            field: "plan".into(),
            msg: format!("expected `[a,(b,c,...)]`, got `{text}`"),
        };
        let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
        let inner = compact
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(")]"))
            .ok_or_else(err)?;
        let (shared, branches) = inner.split_once(",(").ok_or_else(err)?;
        let shared_groups = shared.parse().map_err(|_| err())?;
        let branch_groups = branches
            .split(',')
            .map(|s| s.parse().map_err(|_| err()))
            .collect::<Result<Vec<usize>>>()?;
        let plan = Self::with_groups(arch, shared_groups, branch_groups);
        plan.validate(arch)?;
        Ok(plan)
    }
}

impl fmt::Display for BranchPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let groups: Vec<String> = self.branch_groups.iter().map(|g| g.to_string()).collect();
        write!(f, "[{},({})]", self.shared_groups, groups.join(","))
    }
}
