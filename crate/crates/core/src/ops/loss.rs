//! Temperature softmax, cross-entropy and the distillation KL term.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are floored at this value inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_logits(op: &'static str, z: &Tensor) -> Result<(usize, usize)> {
    z.expect_ndim(op, 2)?;
    let (n, m) = (z.shape()[0], z.shape()[1]);
    if m < 2 {
        return Err(Error::invalid_shape(op, "need at least two classes"));
    }
    if !z.is_finite() {
        return Err(Error::NonFinite { op });
    }
    Ok((n, m))
}

fn check_temperature(t: f32) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")))
    }
}

/// Max-subtracted softmax of `row / t` in double precision.
pub(crate) fn softmax_row(row: &[f32], t: f64) -> Vec<f64> {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let mut e: Vec<f64> = row.iter().map(|&v| ((v as f64 - max) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= s);
    e
}

fn floor_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Row-wise softmax of `z / t`.
pub fn softmax_temp(z: &Tensor, t: f32) -> Result<Tensor> {
    check_logits("softmax_temp", z)?;
    check_temperature(t)?;
    let data = z
        .rows()
        .flat_map(|r| softmax_row(r, t as f64))
        .map(|v| v as f32)
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::Empty("one_hot"));
    }
    let mut data = vec![0.0f32; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::InvalidArgument(format!("label {y} out of range for {classes} classes")));
        }
        data[i * classes + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Per-sample `-sum_m y_m log p_m`.
pub fn cross_entropy(p: &Tensor, y: &Tensor) -> Result<Vec<f32>> {
    p.expect_ndim("cross_entropy", 2)?;
    y.expect_shape("cross_entropy", p.shape())?;
    Ok(p
        .rows()
        .zip(y.rows())
        .map(|(pr, yr)| {
            -pr.iter()
                .zip(yr)
                .map(|(&pv, &yv)| yv as f64 * floor_ln(pv as f64))
                .sum::<f64>() as f32
        })
        .collect())
}

/// Per-sample gradient of `cross_entropy(softmax(z), y)` w.r.t. `z`, i.e. `p - y`.
pub fn softmax_cross_entropy_grad(z: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_logits("cross_entropy", z)?;
    y.expect_shape("cross_entropy", z.shape())?;
    let data = z
        .rows()
        .zip(y.rows())
        .flat_map(|(zr, yr)| {
            softmax_row(zr, 1.0)
                .into_iter()
                .zip(yr)
                .map(|(p, &yv)| (p - yv as f64) as f32)
                .collect::<Vec<_>>()
        })
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

#[derive(Clone, Debug)]
pub struct KdOutput {
    /// Batch mean of `t^2 * KL(p_teacher || p_student)`.
    pub loss: f32,
    /// Gradient of `loss` w.r.t. the student logits.
    pub grad_student: Tensor,
    /// Gradient w.r.t. the teacher logits; `None` when the teacher is detached.
    pub grad_teacher: Option<Tensor>,
}

/// Distillation loss `t^2 * sum_m p_T^m log(p_T^m / p_S^m)` averaged over the batch,
/// with both distributions softened by the same temperature.
pub fn kd_loss(z_student: &Tensor, z_teacher: &Tensor, t: f32, detach_teacher: bool) -> Result<KdOutput> {
    let (n, m) = check_logits("kd_loss", z_student)?;
    check_logits("kd_loss", z_teacher)?;
    z_teacher.expect_shape("kd_loss", z_student.shape())?;
    check_temperature(t)?;
    let t = t as f64;
    let inv_n = 1.0 / n as f64;

    let mut loss = 0.0f64;
    let mut gs = Vec::with_capacity(n * m);
    let mut gt = Vec::with_capacity(if detach_teacher { 0 } else { n * m });
    for (zs, zt) in z_student.rows().zip(z_teacher.rows()) {
        let q = softmax_row(zs, t);
        let p = softmax_row(zt, t);
        let log_ratio: Vec<f64> = p.iter().zip(&q).map(|(&pv, &qv)| floor_ln(pv) - floor_ln(qv)).collect();
        let kl: f64 = p.iter().zip(&log_ratio).map(|(&pv, &a)| pv * a).sum();
        loss += t * t * kl;
        // d(t^2 KL)/dz_s = t (q - p)
        gs.extend(q.iter().zip(&p).map(|(&qv, &pv)| (t * (qv - pv) * inv_n) as f32));
        if !detach_teacher {
            // d(t^2 KL)/dz_t = t p (a - KL)
            gt.extend(
                p.iter()
                    .zip(&log_ratio)
                    .map(|(&pv, &a)| (t * pv * (a - kl) * inv_n) as f32),
            );
        }
    }
    let shape = z_student.shape().to_vec();
    let loss = (loss * inv_n) as f32;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "kd_loss" });
    }
    Ok(KdOutput {
        loss,
        grad_student: Tensor::new(shape.clone(), gs)?,
        grad_teacher: if detach_teacher {
            None
        } else {
            Some(Tensor::new(shape, gt)?)
        },
    })
}
