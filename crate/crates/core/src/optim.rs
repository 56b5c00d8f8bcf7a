//! SGD with heavy-ball momentum and coupled L2 decay, plus the step-then-linear
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub momentum: f32,
    pub weight_decay: f32,
    pub current_lr: f64,
}

impl OptimizerState {
    /// Zero velocity for each parameter shape.
    pub fn new<'a>(
        params: impl IntoIterator<Item = &'a Tensor>,
        momentum: f32,
        weight_decay: f32,
        lr: f64,
    ) -> Self {
        Self {
            velocity: params.into_iter().map(|p| Tensor::zeros(p.shape())).collect(),
            momentum,
            weight_decay,
            current_lr: lr,
        }
    }
}

/// One update over `params`, reading each parameter's gradient buffer:
/// `v <- momentum * v + (grad + weight_decay * param)`, `param <- param - lr * v`.
/// Parameters without a gradient buffer are treated as having zero gradient.
pub fn sgd_step(params: &mut [&mut Tensor], state: &mut OptimizerState) -> Result<()> {
    if params.len() != state.velocity.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer holds {} velocity buffers for {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    for (p, v) in params.iter().zip(&state.velocity) {
        v.expect_shape("sgd_step", p.shape())?;
    }
    let (mom, wd, lr) = (state.momentum, state.weight_decay, state.current_lr as f32);
    for (p, v) in params.iter_mut().zip(state.velocity.iter_mut()) {
        let (pd, g) = p.data_and_grad_mut();
        for ((pv, &gv), vv) in pd.iter_mut().zip(g.iter()).zip(v.data_mut()) {
            *vv = mom * *vv + (gv + wd * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Learning rate for `epoch` out of `total_epochs`: `lr0` for the first half,
/// `lr0 / 10` at the midpoint decreasing linearly to `lr0 / 100` at 90% of
/// training, then held there.
pub fn lr_at(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    let e = epoch as f64;
    let total = total_epochs as f64;
    let (start, end) = (0.5 * total, 0.9 * total);
    let (hi, lo) = (lr0 / 10.0, lr0 / 100.0);
    if e < start {
        lr0
    } else if e >= end {
        lo
    } else {
        hi + (lo - hi) * (e - start) / (end - start)
    }
}
