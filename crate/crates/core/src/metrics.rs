//! Classification, calibration and pairwise diversity metrics.

use serde::{Deserialize, Serialize};

use crate::arch::CostReport;
use crate::error::{Error, Result};
use crate::ops::PROB_FLOOR;
use crate::tensor::Tensor;

/// Default number of equal-width confidence bins for [`ece`].
pub const ECE_BINS: usize = 15;

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predictions(scores: &Tensor) -> Vec<usize> {
    scores.rows().map(argmax).collect()
}

fn check_scores(op: &'static str, scores: &Tensor, labels: &[usize]) -> Result<()> {
    scores.expect_ndim(op, 2)?;
    if labels.is_empty() {
        return Err(Error::Empty(op));
    }
    if scores.shape()[0] != labels.len() {
        return Err(Error::shape(op, &[labels.len(), scores.shape()[1]], scores.shape()));
    }
    Ok(())
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    check_scores("accuracy", scores, labels)?;
    let hits = scores
        .rows()
        .zip(labels)
        .filter(|(r, &y)| argmax(r) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean negative log-probability of the true class (natural log, floored).
/// Rows are renormalised in f64 first, which removes the f32 rounding of the
/// softmax outputs from the log.
pub fn nll(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_scores("nll", probs, labels)?;
    let total: f64 = probs
        .rows()
        .zip(labels)
        .map(|(r, &y)| {
            let sum: f64 = r.iter().map(|&v| v as f64).sum();
            let p = if sum > 0.0 { r[y] as f64 / sum } else { r[y] as f64 };
            -p.max(PROB_FLOOR).ln()
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Bin of a confidence in `(0, 1]` split into `n_bins` right-closed bins.
fn confidence_bin(conf: f64, n_bins: usize) -> usize {
    let n = n_bins as f64;
    let mut b = ((conf * n).ceil() as usize).clamp(1, n_bins) - 1;
    // Settle rounding at bin edges against the exact interval test.
    while b > 0 && conf <= b as f64 / n {
        b -= 1;
    }
    while b + 1 < n_bins && conf > (b + 1) as f64 / n {
        b += 1;
    }
    b
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

/// Per-bin accuracy and mean confidence (reliability diagram data).
pub fn reliability_bins(probs: &Tensor, labels: &[usize], n_bins: usize) -> Result<Vec<ReliabilityBin>> {
    check_scores("ece", probs, labels)?;
    if n_bins == 0 {
        return Err(Error::InvalidArgument("ece needs at least one bin".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0f64; n_bins];
    for (row, &y) in probs.rows().zip(labels) {
        let pred = argmax(row);
        let conf = row[pred] as f64;
        let b = confidence_bin(conf, n_bins);
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == y {
            correct[b] += 1;
        }
    }
    Ok((0..n_bins)
        .map(|b| {
            let c = count[b];
            ReliabilityBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count: c,
                accuracy: if c == 0 { 0.0 } else { correct[b] as f64 / c as f64 },
                confidence: if c == 0 { 0.0 } else { conf_sum[b] / c as f64 },
            }
        })
        .collect())
}

/// Expected calibration error: `sum_b |b|/S * |acc(b) - conf(b)|` over
/// equal-width right-closed confidence bins; empty bins contribute nothing.
pub fn ece(probs: &Tensor, labels: &[usize], n_bins: usize) -> Result<f64> {
    let bins = reliability_bins(probs, labels, n_bins)?;
    let s = labels.len() as f64;
    Ok(bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / s * (b.accuracy - b.confidence).abs())
        .sum())
}

/// Fraction of samples two members classify differently.
pub fn prediction_disagreement(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::Empty("prediction_disagreement"));
    }
    if a.len() != b.len() {
        return Err(Error::shape("prediction_disagreement", &[a.len()], &[b.len()]));
    }
    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok(diff as f64 / a.len() as f64)
}

/// Mean per-sample cosine similarity between two members' output distributions.
pub fn cosine_similarity_outputs(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_ndim("cosine_similarity", 2)?;
    b.expect_shape("cosine_similarity", a.shape())?;
    let mut total = 0.0f64;
    for (ra, rb) in a.rows().zip(b.rows()) {
        let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in ra.iter().zip(rb) {
            dot += x as f64 * y as f64;
            na += x as f64 * x as f64;
            nb += y as f64 * y as f64;
        }
        if na == 0.0 || nb == 0.0 {
            return Err(Error::InvalidArgument(
                "cosine similarity of a zero-norm row".into(),
            ));
        }
        total += dot / (na.sqrt() * nb.sqrt());
    }
    Ok(total / a.shape()[0] as f64)
}

/// Symmetric pairwise matrices over ensemble members.
pub fn pairwise_matrix(n: usize, diag: f64, mut f: impl FnMut(usize, usize) -> Result<f64>) -> Result<Vec<Vec<f64>>> {
    let mut m = vec![vec![diag; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = f(i, j)?;
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Ok(m)
}

/// Mean of the strictly upper triangle; `None` for a single member.
pub fn mean_off_diagonal(m: &[Vec<f64>]) -> Option<f64> {
    let n = m.len();
    if n < 2 {
        return None;
    }
    let mut sum = 0.0;
    for (i, row) in m.iter().enumerate() {
        for v in &row[i + 1..] {
            sum += v;
        }
    }
    Some(sum / (n * (n - 1) / 2) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ensemble_acc: f64,
    pub per_branch_acc: Vec<f64>,
    pub nll: f64,
    pub ece: f64,
    pub pd_matrix: Vec<Vec<f64>>,
    pub cs_matrix: Vec<Vec<f64>>,
    pub mean_pd: Option<f64>,
    pub mean_cs: Option<f64>,
    pub cost: CostReport,
    pub reliability: Vec<ReliabilityBin>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `Acc,NLL,ECE,FLOPs(GMac),Params(M)` with accuracy in percent.
    pub fn table1_csv(&self) -> String {
        format!(
            "acc,nll,ece,flops_gmac,params_m\n{:.2},{:.4},{:.4},{:.4},{:.4}\n",
            self.ensemble_acc * 100.0,
            self.nll,
            self.ece,
            self.cost.flops_gmac(),
            self.cost.params_m()
        )
    }
}
