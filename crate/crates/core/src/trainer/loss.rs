use crate::error::{Error, Result};
use crate::ops::{kd_loss, softmax_cross_entropy_grad, softmax_temp, cross_entropy, one_hot};
use crate::tensor::Tensor;

use super::TrainConfig;

/// Elementwise mean of the branch logits; the teacher during training and
/// the ensemble prediction at inference.
pub fn ensemble_logits(z: &[Tensor]) -> Result<Tensor> {
    let first = z.first().ok_or(Error::Empty("ensemble_logits"))?;
    first.expect_ndim("ensemble_logits", 2)?;
    let mut acc = vec![0.0f64; first.numel()];
    for zi in z {
        zi.expect_shape("ensemble_logits", first.shape())?;
        for (a, &v) in acc.iter_mut().zip(zi.data()) {
            *a += v as f64;
        }
    }
    let inv = 1.0 / z.len() as f64;
    Tensor::new(first.shape().to_vec(), acc.into_iter().map(|a| (a * inv) as f32).collect())
}

/// Per-branch loss terms, each a batch mean.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub ce: Vec<f64>,
    /// `t^2 * KL(p_E || p_i)`, before the `alpha` weight.
    pub kd: Vec<f64>,
}

impl LossComponents {
    pub fn ce_total(&self) -> f64 {
        self.ce.iter().sum()
    }

    pub fn kd_total(&self) -> f64 {
        self.kd.iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    /// `sum_i CE_i + alpha * sum_i KD_i`
    pub loss: f64,
    pub components: LossComponents,
    /// Gradient of `loss` w.r.t. each branch's logits.
    pub grads: Vec<Tensor>,
}

/// Summed branch cross-entropies plus `alpha`-weighted distillation from the
/// averaged-logit teacher, both softened by the configured temperature.
pub fn total_loss(z: &[Tensor], labels: &[usize], cfg: &TrainConfig) -> Result<LossOutput> {
    let z_e = ensemble_logits(z)?;
    let (b, m) = (z_e.shape()[0], z_e.shape()[1]);
    if labels.len() != b {
        return Err(Error::shape("total_loss", &[b], &[labels.len()]));
    }
    let y = one_hot(labels, m)?;
    let n = z.len();
    let inv_b = 1.0 / b as f32;
    let alpha = cfg.alpha;

    let mut components = LossComponents::default();
    let mut grads = Vec::with_capacity(n);
    let mut teacher_grad: Option<Vec<f64>> = None;
    for zi in z {
        let p = softmax_temp(zi, 1.0)?;
        let ce = cross_entropy(&p, &y)?;
        components.ce.push(ce.iter().map(|&v| v as f64).sum::<f64>() / b as f64);
        let mut g = softmax_cross_entropy_grad(zi, &y)?;
        g.data_mut().iter_mut().for_each(|v| *v *= inv_b);

        let kd = kd_loss(zi, &z_e, cfg.temperature, cfg.detach_teacher)?;
        components.kd.push(kd.loss as f64);
        for (gv, &kv) in g.data_mut().iter_mut().zip(kd.grad_student.data()) {
            *gv += alpha * kv;
        }
        if let Some(gt) = kd.grad_teacher {
            let acc = teacher_grad.get_or_insert_with(|| vec![0.0; gt.numel()]);
            for (a, &v) in acc.iter_mut().zip(gt.data()) {
                *a += v as f64;
            }
        }
        grads.push(g);
    }
    // z_E = mean of z_i, so each branch receives 1/N of the teacher gradient.
    if let Some(gt) = teacher_grad {
        let scale = alpha as f64 / n as f64;
        for g in &mut grads {
            for (gv, &tv) in g.data_mut().iter_mut().zip(&gt) {
                *gv += (scale * tv) as f32;
            }
        }
    }
    let loss = components.ce_total() + alpha as f64 * components.kd_total();
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: "total_loss" });
    }
    Ok(LossOutput {
        loss,
        components,
        grads,
    })
}
