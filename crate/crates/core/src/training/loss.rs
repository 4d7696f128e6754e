use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Sum of masked token NLLs and the gradient of `sum / denom`.
///
/// Splitting the normaliser out lets per-sequence workers produce gradients
/// of a batch-level mean.
pub fn masked_nll_sum(
    logits: &Matrix,
    targets: &[usize],
    mask: &[bool],
    denom: f64,
) -> Result<(f64, Matrix)> {
    let (rows, vocab) = logits.shape();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::shape(
            "cross_entropy_masked",
            format!(
                "logits have {rows} rows, targets {}, mask {}",
                targets.len(),
                mask.len()
            ),
        ));
    }
    let mut grad = Matrix::zeros(rows, vocab);
    let mut total = 0.0;
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let t = targets[r];
        if t >= vocab {
            return Err(Error::domain(
                "cross_entropy_masked",
                format!("target {t} outside vocabulary of {vocab}"),
            ));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let g = grad.row_mut(r);
        let mut z = 0.0;
        for (gc, &x) in g.iter_mut().zip(row) {
            *gc = (x - max).exp();
            z += *gc;
        }
        total += max + z.ln() - row[t];
        for gc in g.iter_mut() {
            *gc /= z * denom;
        }
        g[t] -= 1.0 / denom;
    }
    Ok((total, grad))
}

/// Mean NLL over masked rows and its gradient
/// `(softmax − onehot) / n_masked` on masked rows, zero elsewhere.
pub fn cross_entropy_masked(
    logits: &Matrix,
    targets: &[usize],
    mask: &[bool],
) -> Result<(f64, Matrix)> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::domain("cross_entropy_masked", "no masked positions"));
    }
    let (sum, grad) = masked_nll_sum(logits, targets, mask, n as f64)?;
    Ok((sum / n as f64, grad))
}
