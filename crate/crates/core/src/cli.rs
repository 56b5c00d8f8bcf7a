//! Experiment configuration and the `transform`, `train`, `eval` and
//! `diversity` commands.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::arch::{
    cost_report, emit_report, parse_arch_spec, transform, ArchReport, ArchSpec, BranchPlan,
    CostReport, MultiBranchArch,
};
use crate::data::{
    load_cifar10, load_cifar100, read_dataset, synthetic_blobs, AugmentConfig, BlobsConfig, Dataset,
    Split,
};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::trainer::{evaluate, load_checkpoint, save_checkpoint, train_run, History, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

/// Stream offset separating the test-set draw from the training-set draw.
const TEST_SEED_OFFSET: u64 = 0x7465_7374;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchRef {
    /// `wrn<depth>-<widen>`, `resnet18` or `resnet34`.
    Preset { name: String, num_classes: usize },
    Inline(ArchSpec),
    /// Path to an architecture JSON file.
    File(PathBuf),
}

impl ArchRef {
    pub fn resolve(&self) -> Result<ArchSpec> {
        match self {
            ArchRef::Preset { name, num_classes } => preset(name, *num_classes),
            ArchRef::Inline(spec) => {
                spec.validate()?;
                Ok(spec.clone())
            }
            ArchRef::File(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read architecture {}: {e}", path.display()))
                })?;
                parse_arch_spec(&text)
            }
        }
    }
}

fn preset(name: &str, num_classes: usize) -> Result<ArchSpec> {
    let lower = name.to_ascii_lowercase();
    if let Some(rest) = lower.strip_prefix("wrn") {
        let (d, k) = rest
            .trim_start_matches('-')
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("preset `{name}`: expected wrn<depth>-<widen>")))?;
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Config(format!("preset `{name}`: `{s}` is not a number")))
        };
        return ArchSpec::wide_resnet(parse(d)?, parse(k)?, num_classes);
    }
    match lower.as_str() {
        "resnet18" => ArchSpec::resnet(18, num_classes),
        "resnet34" => ArchSpec::resnet(34, num_classes),
        _ => Err(Error::Config(format!("unknown architecture preset `{name}`"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Synthetic blobs; train and test draws are seeded from the training seed.
    Blobs {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        image_hw: usize,
        channels: usize,
        noise_sigma: f32,
    },
    Cifar10 { path: PathBuf },
    Cifar100 { path: PathBuf },
    /// Datasets previously exported in the binary container format.
    Container { train: PathBuf, test: PathBuf },
}

impl DatasetConfig {
    /// Train and test splits.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::Blobs {
                classes,
                per_class,
                test_per_class,
                image_hw,
                channels,
                noise_sigma,
            } => {
                let cfg = BlobsConfig {
                    classes: *classes,
                    per_class: *per_class,
                    image_hw: *image_hw,
                    channels: *channels,
                    noise_sigma: *noise_sigma,
                    seed,
                };
                let train = synthetic_blobs(&cfg)?;
                let mut test = synthetic_blobs(&BlobsConfig {
                    per_class: *test_per_class,
                    seed: seed.wrapping_add(TEST_SEED_OFFSET),
                    ..cfg
                })?;
                test.split = Split::Test;
                Ok((train, test))
            }
            DatasetConfig::Cifar10 { path } => load_cifar10(path),
            DatasetConfig::Cifar100 { path } => load_cifar100(path),
            DatasetConfig::Container { train, test } => {
                let tr = read_dataset(train)?;
                let mut te = read_dataset(test)?;
                te.split = Split::Test;
                Ok((tr, te))
            }
        }
    }

    /// Spatial input size, reading a container header if needed.
    pub fn input_hw(&self) -> Result<(usize, usize)> {
        match self {
            DatasetConfig::Blobs { image_hw, .. } => Ok((*image_hw, *image_hw)),
            DatasetConfig::Cifar10 { .. } | DatasetConfig::Cifar100 { .. } => Ok((32, 32)),
            DatasetConfig::Container { test, .. } => {
                let [_, h, w] = read_dataset(test)?.image_shape();
                Ok((h, w))
            }
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub run_id: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub arch: ArchRef,
    /// Group notation such as `[1,(1,2,3)]`; the default plan when absent.
    #[serde(default)]
    pub plan: Option<String>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let id_ok = !self.run_id.is_empty()
            && self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            && !self.run_id.starts_with('.');
        if !id_ok {
            return Err(Error::Config(format!(
                "run_id `{}` must be non-empty and use only letters, digits, `-`, `_` and `.`",
                self.run_id
            )));
        }
        self.train.validate()
    }

    /// The 3-branch toy network on the 4-class synthetic blobs task.
    pub fn toy_blobs(run_id: &str) -> Self {
        Self {
            version: CONFIG_VERSION,
            run_id: run_id.into(),
            output_dir: default_output_dir(),
            arch: ArchRef::Inline(
                ArchSpec::toy(3, vec![16, 32], vec![1, 1], 4).expect("valid toy architecture"),
            ),
            plan: Some("[1,(1,2,3)]".into()),
            dataset: DatasetConfig::Blobs {
                classes: 4,
                per_class: 500,
                test_per_class: 250,
                image_hw: 16,
                channels: 3,
                noise_sigma: 2.0,
            },
            train: TrainConfig {
                epochs: 30,
                batch_size: 64,
                augment: AugmentConfig::OFF,
                log_diversity_every: 5,
                ..TrainConfig::default()
            },
        }
    }

    pub fn arch_spec(&self) -> Result<ArchSpec> {
        self.arch.resolve()
    }

    pub fn plan(&self, arch: &ArchSpec) -> Result<BranchPlan> {
        match &self.plan {
            Some(text) => BranchPlan::parse_notation(text, arch),
            None => Ok(BranchPlan::default_for(arch)),
        }
    }

    pub fn multi_branch(&self) -> Result<MultiBranchArch> {
        let spec = self.arch_spec()?;
        let plan = self.plan(&spec)?;
        transform(&spec, &plan)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    fn check_classes(&self, arch: &MultiBranchArch, data: &Dataset) -> Result<()> {
        if arch.num_classes() != data.num_classes {
            return Err(Error::Config(format!(
                "architecture predicts {} classes but the dataset has {}",
                arch.num_classes(),
                data.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformReport {
    pub arch: ArchReport,
    pub single: CostReport,
    pub params_ratio: f64,
    pub flops_ratio: f64,
}

pub fn cmd_transform(cfg: &ExperimentConfig) -> Result<TransformReport> {
    let spec = cfg.arch_spec()?;
    let plan = cfg.plan(&spec)?;
    let hw = cfg.dataset.input_hw()?;
    let multi = transform(&spec, &plan)?;
    let single = cost_report(&transform(&spec, &BranchPlan::single(&spec))?, hw);
    let arch = emit_report(&multi, hw);
    let report = TransformReport {
        params_ratio: arch.cost.params as f64 / single.params as f64,
        flops_ratio: arch.cost.flops_mac as f64 / single.flops_mac as f64,
        arch,
        single,
    };
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("arch_report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Outcome of `train`: history plus the test-set evaluation of the final model.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: History,
    pub test: EvalReport,
    pub run_dir: PathBuf,
}

/// Trains, then writes `config.json`, `history.csv`, `model.ckpt` and
/// `eval_report.json` under the run directory. A non-finite loss leaves
/// `failure.json` naming the epoch and batch.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let spec = cfg.arch_spec()?;
    let plan = cfg.plan(&spec)?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), cfg.to_json()?)?;
    let (train, test) = cfg.dataset.load(cfg.train.seed)?;
    cfg.check_classes(&transform(&spec, &plan)?, &train)?;
    let (mut trainer, history) = match train_run(&spec, &plan, &train, &cfg.train) {
        Ok(r) => r,
        Err(e @ Error::NonFiniteLoss { epoch, batch }) => {
            let diag = serde_json::json!({ "error": e.to_string(), "epoch": epoch, "batch": batch });
            fs::write(dir.join("failure.json"), serde_json::to_string_pretty(&diag)?)?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    fs::write(dir.join("history.csv"), history.to_csv()?)?;
    save_checkpoint(&dir.join("model.ckpt"), &mut trainer.model, &trainer.state)?;
    let test = evaluate(&trainer.model, &test, cfg.train.eval_batch_size)?;
    fs::write(dir.join("eval_report.json"), test.to_json()?)?;
    Ok(TrainOutcome {
        history,
        test,
        run_dir: dir,
    })
}

fn checkpoint_path(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> PathBuf {
    checkpoint.map_or_else(|| cfg.run_dir().join("model.ckpt"), Path::to_path_buf)
}

fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let arch = cfg.multi_branch()?;
    let path = checkpoint_path(cfg, checkpoint);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let (model, _) = load_checkpoint(&path, &arch)?;
    let (_, test) = cfg.dataset.load(cfg.train.seed)?;
    cfg.check_classes(&arch, &test)?;
    evaluate(&model, &test, cfg.train.eval_batch_size)
}

/// Writes `eval_report.json` and `table1.csv` for the checkpoint on the test split.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let report = evaluate_checkpoint(cfg, checkpoint)?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("eval_report.json"), report.to_json()?)?;
    fs::write(dir.join("table1.csv"), report.table1_csv())?;
    Ok(report)
}

fn matrix_csv(m: &[Vec<f64>]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let header: Vec<String> = (0..m.len()).map(|i| format!("branch_{i}")).collect();
    w.write_record(&header)?;
    for row in m {
        w.write_record(row.iter().map(f64::to_string))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes `pd_matrix.csv` and `cs_matrix.csv`; returns `(pd, cs)`.
pub fn cmd_diversity(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let report = evaluate_checkpoint(cfg, checkpoint)?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("pd_matrix.csv"), matrix_csv(&report.pd_matrix)?)?;
    fs::write(dir.join("cs_matrix.csv"), matrix_csv(&report.cs_matrix)?)?;
    Ok((report.pd_matrix, report.cs_matrix))
}

/// Process exit status for an error: 2 configuration, 3 data, 4 numeric.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::InvalidPlan(_)
        | Error::InvalidArch(_)
        | Error::ChannelUnderflow { .. }
        | Error::GroupDivisibility { .. }
        | Error::InvalidArgument(_)
        | Error::Json(_) => 2,
        Error::Format { .. }
        | Error::MissingFile(_)
        | Error::CorruptCheckpoint(_)
        | Error::CheckpointVersion { .. }
        | Error::ArchMismatch { .. }
        | Error::Csv(_)
        | Error::Io(_)
        | Error::ShapeMismatch { .. }
        | Error::InvalidShape { .. }
        | Error::Empty(_) => 3,
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::DegenerateStatistics { .. } => 4,
    }
}

#[derive(Debug, Parser)]
#[command(name = "sembg", version, about = "Multi-branch self-ensemble experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint to read; defaults to `<out>/<run_id>/model.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Forces deterministic mode regardless of the configuration.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print branch layout and cost against the single-path network.
    Transform(CommonArgs),
    /// Train and write history, checkpoint and test report.
    Train(CommonArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(CommonArgs),
    /// Pairwise branch diversity of a checkpoint.
    Diversity(CommonArgs),
}

impl CommonArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if self.deterministic {
            cfg.train.deterministic = true;
        }
        Ok(cfg)
    }
}

/// Runs one command, returning what it prints to stdout.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Transform(a) => {
            let r = cmd_transform(&a.config()?)?;
            Ok(serde_json::to_string_pretty(&r)?)
        }
        Command::Train(a) => {
            let o = cmd_train(&a.config()?)?;
            Ok(format!(
                "trained {} epochs; test ensemble accuracy {:.4}; outputs in {}",
                o.history.len(),
                o.test.ensemble_acc,
                o.run_dir.display()
            ))
        }
        Command::Eval(a) => cmd_eval(&a.config()?, a.checkpoint.as_deref())?.to_json(),
        Command::Diversity(a) => {
            let (pd, cs) = cmd_diversity(&a.config()?, a.checkpoint.as_deref())?;
            Ok(format!("pd\n{}cs\n{}", matrix_csv(&pd)?, matrix_csv(&cs)?))
        }
    }
}
