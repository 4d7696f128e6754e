use super::loss::masked_nll_sum;
use crate::error::{Error, Result};
use crate::model::{transformer_backward, transformer_forward, Model, ParamGrads};
use crate::parallel::Exec;
use crate::tasks::TaskInstance;

/// Mean masked NLL over the whole batch and its parameter gradient.
///
/// Sequences are processed independently under `exec`; their gradients are
/// summed in batch order, so the result does not depend on the worker count.
pub fn batch_loss_and_grads(
    model: &Model,
    batch: &[TaskInstance],
    exec: Exec,
) -> Result<(f64, ParamGrads)> {
    let n_masked: usize = batch.iter().map(TaskInstance::n_masked).sum();
    if n_masked == 0 {
        return Err(Error::domain(
            "batch_loss_and_grads",
            "batch has no masked positions",
        ));
    }
    let denom = n_masked as f64;
    let parts = exec.map(batch.len(), |i| -> Result<(f64, ParamGrads)> {
        let inst = &batch[i];
        let (logits, cache) = transformer_forward(&inst.tokens, &model.params, &model.cfg)?;
        let (sum, d_logits) = masked_nll_sum(&logits, &inst.targets, &inst.loss_mask, denom)?;
        let grads = transformer_backward(&cache, &model.params, &model.cfg, &d_logits)?;
        Ok((sum, grads))
    });
    let mut parts = parts.into_iter();
    let (mut total, mut grads) = parts.next().expect("nonempty batch")?;
    for part in parts {
        let (sum, g) = part?;
        total += sum;
        grads.add_scaled(&g, 1.0)?;
    }
    Ok((total / denom, grads))
}

/// Loss only, same normalisation as [`batch_loss_and_grads`].
pub fn batch_loss(model: &Model, batch: &[TaskInstance], exec: Exec) -> Result<f64> {
    let n_masked: usize = batch.iter().map(TaskInstance::n_masked).sum();
    if n_masked == 0 {
        return Err(Error::domain("batch_loss", "batch has no masked positions"));
    }
    let sums = exec.map(batch.len(), |i| -> Result<f64> {
        let inst = &batch[i];
        let logits = model.logits(&inst.tokens)?;
        Ok(masked_nll_sum(&logits, &inst.targets, &inst.loss_mask, 1.0)?.0)
    });
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / n_masked as f64)
}
