use crate::arch::cost_report;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{
    accuracy, cosine_similarity_outputs, ece, mean_off_diagonal, nll, pairwise_matrix, predictions,
    prediction_disagreement, reliability_bins, EvalReport, ECE_BINS,
};
use crate::model::Model;
use crate::ops::softmax_temp;
use crate::tensor::Tensor;

use super::ensemble_logits;

/// Eval-mode softmax outputs of every branch and of the averaged-logit ensemble.
#[derive(Clone, Debug)]
pub struct BranchOutputs {
    /// `[branch]` of `[S, M]` probabilities.
    pub branch_probs: Vec<Tensor>,
    pub ensemble_probs: Tensor,
}

fn concat_rows(parts: Vec<Tensor>) -> Result<Tensor> {
    let cols = parts[0].shape()[1];
    let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![rows, cols], data)
}

pub fn branch_outputs(model: &Model, data: &Dataset, batch_size: usize) -> Result<BranchOutputs> {
    if data.is_empty() {
        return Err(Error::Empty("evaluate"));
    }
    let n = model.n_branches();
    let mut branch_parts: Vec<Vec<Tensor>> = vec![Vec::new(); n];
    let mut ens_parts = Vec::new();
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(batch_size.max(1)) {
        let (x, _) = data.gather(idx);
        let z = model.infer(&x)?;
        ens_parts.push(softmax_temp(&ensemble_logits(&z)?, 1.0)?);
        for (parts, zi) in branch_parts.iter_mut().zip(&z) {
            parts.push(softmax_temp(zi, 1.0)?);
        }
    }
    Ok(BranchOutputs {
        branch_probs: branch_parts.into_iter().map(concat_rows).collect::<Result<_>>()?,
        ensemble_probs: concat_rows(ens_parts)?,
    })
}

impl BranchOutputs {
    pub fn branch_accuracy(&self, labels: &[usize]) -> Result<Vec<f64>> {
        self.branch_probs.iter().map(|p| accuracy(p, labels)).collect()
    }

    pub fn ensemble_accuracy(&self, labels: &[usize]) -> Result<f64> {
        accuracy(&self.ensemble_probs, labels)
    }

    /// Pairwise prediction-disagreement and cosine-similarity matrices.
    pub fn diversity(&self) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let n = self.branch_probs.len();
        let preds: Vec<Vec<usize>> = self.branch_probs.iter().map(predictions).collect();
        let pd = pairwise_matrix(n, 0.0, |i, j| prediction_disagreement(&preds[i], &preds[j]))?;
        let cs = pairwise_matrix(n, 1.0, |i, j| {
            cosine_similarity_outputs(&self.branch_probs[i], &self.branch_probs[j])
        })?;
        Ok((pd, cs))
    }
}

/// Accuracy, calibration, diversity and cost of `model` on `data`.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    let out = branch_outputs(model, data, batch_size)?;
    let (pd, cs) = out.diversity()?;
    let [_, h, w] = data.image_shape();
    Ok(EvalReport {
        ensemble_acc: out.ensemble_accuracy(&data.labels)?,
        per_branch_acc: out.branch_accuracy(&data.labels)?,
        nll: nll(&out.ensemble_probs, &data.labels)?,
        ece: ece(&out.ensemble_probs, &data.labels, ECE_BINS)?,
        mean_pd: mean_off_diagonal(&pd),
        mean_cs: mean_off_diagonal(&cs),
        pd_matrix: pd,
        cs_matrix: cs,
        cost: cost_report(&model.arch, (h, w)),
        reliability: reliability_bins(&out.ensemble_probs, &data.labels, ECE_BINS)?,
    })
}
