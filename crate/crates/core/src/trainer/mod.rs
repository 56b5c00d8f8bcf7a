//! Joint training of all branches with ensemble-teacher distillation.

mod checkpoint;
mod eval;
mod loss;

use serde::{Deserialize, Serialize};

pub use checkpoint::{arch_hash, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use eval::{branch_outputs, evaluate, BranchOutputs};
pub use loss::{ensemble_logits, total_loss, LossComponents, LossOutput};

use crate::arch::{transform, ArchSpec, BranchPlan, MultiBranchArch};
use crate::data::{augment, batches, epoch_rng, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops::Mode;
use crate::optim::{lr_at, sgd_step, OptimizerState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f32,
    pub alpha: f32,
    pub detach_teacher: bool,
    pub seed: u64,
    pub deterministic: bool,
    /// Pairwise diversity is logged every this many epochs; 0 disables it.
    pub log_diversity_every: usize,
    pub augment: AugmentConfig,
    /// Share of the training data held out for validation.
    pub val_fraction: f64,
    /// Batch size used for evaluation passes.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 200,
            batch_size: 128,
            temperature: 3.0,
            alpha: 1.0,
            detach_teacher: true,
            seed: 0,
            deterministic: true,
            log_diversity_every: 1,
            augment: AugmentConfig::CIFAR,
            val_fraction: 0.1,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight_decay non-negative".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }
}

/// Everything besides the weights needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub optimizer: OptimizerState,
    /// Base seed; batch order and augmentation of epoch `e` are derived from
    /// `(seed, e)`, so together with `epoch` this is the full RNG state.
    pub seed: u64,
    /// Per-branch loss terms averaged over the last completed epoch.
    pub last: LossComponents,
}

impl TrainState {
    pub fn new(model: &mut Model, cfg: &TrainConfig) -> Self {
        let params = model.params_mut();
        Self {
            epoch: 0,
            step: 0,
            optimizer: OptimizerState::new(
                params.iter().map(|p| &**p),
                cfg.momentum,
                cfg.weight_decay,
                cfg.lr0,
            ),
            seed: cfg.seed,
            last: LossComponents::default(),
        }
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sum over branches of the epoch-mean cross-entropy.
    pub loss_ce: f64,
    /// Sum over branches of the epoch-mean distillation term (before `alpha`).
    pub loss_kd: f64,
    pub branch_val_acc: Vec<f64>,
    pub ensemble_val_acc: f64,
    pub pd_matrix: Option<Vec<Vec<f64>>>,
    pub cs_matrix: Option<Vec<Vec<f64>>>,
    pub mean_pd: Option<f64>,
    pub mean_cs: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> Result<String> {
        let n = self.records.first().map_or(0, |r| r.branch_val_acc.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = ["epoch", "lr", "L_CE", "L_KD"].map(String::from).to_vec();
        header.extend((0..n).map(|i| format!("val_acc_branch_{i}")));
        header.extend(["val_acc_ensemble", "mean_pd", "mean_cs"].map(String::from));
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                r.lr.to_string(),
                r.loss_ce.to_string(),
                r.loss_kd.to_string(),
            ];
            row.extend(r.branch_val_acc.iter().map(f64::to_string));
            row.push(r.ensemble_val_acc.to_string());
            row.push(opt(r.mean_pd));
            row.push(opt(r.mean_cs));
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Epoch-level training summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub lr: f64,
    pub components: LossComponents,
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(arch: &MultiBranchArch, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut model = Model::new(arch, cfg.seed)?;
        let state = TrainState::new(&mut model, &cfg);
        Ok(Self { model, cfg, state })
    }

    pub fn from_parts(model: Model, cfg: TrainConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { model, cfg, state })
    }

    /// One optimizer step at the optimizer's current learning rate.
    pub fn train_step(&mut self, x: &Tensor, labels: &[usize]) -> Result<LossOutput> {
        self.model.set_mode(Mode::Train);
        self.model.zero_grad();
        let (z, cache) = self.model.forward(x)?;
        let out = total_loss(&z, labels, &self.cfg)?;
        self.model.backward(&cache, &out.grads)?;
        let mut params = self.model.params_mut();
        sgd_step(&mut params, &mut self.state.optimizer)?;
        self.state.step += 1;
        Ok(out)
    }

    /// One pass over `train` in the seeded order of the current epoch.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<EpochStats> {
        if train.is_empty() {
            return Err(Error::Empty("train_epoch"));
        }
        let epoch = self.state.epoch;
        let lr = lr_at(epoch, self.cfg.epochs, self.cfg.lr0);
        self.state.optimizer.current_lr = lr;
        let mut aug_rng = epoch_rng(self.state.seed, epoch);
        let n = self.model.n_branches();
        let mut sums = LossComponents {
            ce: vec![0.0; n],
            kd: vec![0.0; n],
        };
        for (batch, idx) in batches(train.len(), self.cfg.batch_size, self.state.seed, epoch)
            .iter()
            .enumerate()
        {
            let (mut x, y) = train.gather(idx);
            if self.cfg.augment.enabled {
                x = augment(&x, self.cfg.augment.pad, self.cfg.augment.hflip, &mut aug_rng);
            }
            let out = self.train_step(&x, &y).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, batch },
                e => e,
            })?;
            let w = idx.len() as f64;
            for i in 0..n {
                sums.ce[i] += w * out.components.ce[i];
                sums.kd[i] += w * out.components.kd[i];
            }
        }
        let total = train.len() as f64;
        sums.ce.iter_mut().chain(sums.kd.iter_mut()).for_each(|v| *v /= total);
        self.state.epoch += 1;
        self.state.last = sums.clone();
        Ok(EpochStats {
            lr,
            components: sums,
        })
    }

    /// Trains from the current epoch up to `cfg.epochs`, validating after each epoch.
    pub fn fit(&mut self, train: &Dataset, val: &Dataset) -> Result<History> {
        let mut history = History::default();
        while self.state.epoch < self.cfg.epochs {
            let stats = self.train_epoch(train)?;
            let epoch = self.state.epoch - 1;
            let k = self.cfg.log_diversity_every;
            let with_diversity = k > 0 && (epoch + 1) % k == 0;
            let out = branch_outputs(&self.model, val, self.cfg.eval_batch_size)?;
            let (pd, cs) = if with_diversity {
                let (pd, cs) = out.diversity()?;
                (Some(pd), Some(cs))
            } else {
                (None, None)
            };
            history.records.push(EpochRecord {
                epoch,
                lr: stats.lr,
                loss_ce: stats.components.ce_total(),
                loss_kd: stats.components.kd_total(),
                branch_val_acc: out.branch_accuracy(&val.labels)?,
                ensemble_val_acc: out.ensemble_accuracy(&val.labels)?,
                mean_pd: pd.as_deref().and_then(crate::metrics::mean_off_diagonal),
                mean_cs: cs.as_deref().and_then(crate::metrics::mean_off_diagonal),
                pd_matrix: pd,
                cs_matrix: cs,
            });
        }
        Ok(history)
    }
}

/// Transforms `arch` by `plan`, holds out `cfg.val_fraction` of `data` for
/// validation and trains for `cfg.epochs`.
pub fn train_run(arch: &ArchSpec, plan: &BranchPlan, data: &Dataset, cfg: &TrainConfig) -> Result<(Trainer, History)> {
    let mb = transform(arch, plan)?;
    let (train, val) = data.holdout(cfg.val_fraction, cfg.seed)?;
    let mut trainer = Trainer::new(&mb, cfg.clone())?;
    let history = trainer.fit(&train, &val)?;
    Ok((trainer, history))
}
