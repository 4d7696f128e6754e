//! Evaluation of next-token predictors on recall tasks and held-out text.

use super::instance::TaskInstance;
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{derive_seed, Matrix, Rng};
use crate::parallel::Exec;

/// Anything that maps a token sequence to one row of logits per position.
pub trait Predictor: Sync {
    fn logits(&self, tokens: &[usize]) -> Result<Matrix>;
}

impl Predictor for Model {
    fn logits(&self, tokens: &[usize]) -> Result<Matrix> {
        Model::logits(self, tokens)
    }
}

/// Equal logits everywhere.
#[derive(Debug, Clone, Copy)]
pub struct UniformPredictor {
    pub vocab: usize,
}

impl Predictor for UniformPredictor {
    fn logits(&self, tokens: &[usize]) -> Result<Matrix> {
        Ok(Matrix::zeros(tokens.len(), self.vocab))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AccuracyCount {
    pub correct: usize,
    pub total: usize,
}

impl AccuracyCount {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Argmax restricted to `candidates`; exact ties are broken uniformly.
fn argmax_among(row: &[f64], candidates: std::ops::Range<usize>, rng: &mut Rng) -> usize {
    let best = candidates
        .clone()
        .map(|c| row[c])
        .fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = candidates.filter(|&c| row[c] == best).collect();
    if tied.len() == 1 {
        tied[0]
    } else {
        tied[rng.below(tied.len())]
    }
}

/// Correct predictions at the loss-masked positions. The prediction is the
/// highest-scoring value token; instance `i` breaks ties with the stream
/// `derive_seed(tie_seed, i)`.
pub fn count_query_hits(
    model: &impl Predictor,
    instances: &[TaskInstance],
    vocab: &Vocab,
    tie_seed: u64,
    exec: Exec,
) -> Result<AccuracyCount> {
    let per_instance = exec.map(instances.len(), |i| -> Result<AccuracyCount> {
        let inst = &instances[i];
        let logits = model.logits(&inst.tokens)?;
        let mut rng = Rng::new(derive_seed(tie_seed, i as u64));
        let mut count = AccuracyCount::default();
        for t in inst.masked_positions() {
            count.total += 1;
            if argmax_among(logits.row(t), vocab.value_ids(), &mut rng) == inst.targets[t] {
                count.correct += 1;
            }
        }
        Ok(count)
    });
    let mut total = AccuracyCount::default();
    for c in per_instance {
        let c = c?;
        total.correct += c.correct;
        total.total += c.total;
    }
    Ok(total)
}

pub fn eval_query_accuracy(
    model: &impl Predictor,
    instances: &[TaskInstance],
    vocab: &Vocab,
    tie_seed: u64,
    exec: Exec,
) -> Result<f64> {
    let count = count_query_hits(model, instances, vocab, tie_seed, exec)?;
    if count.total == 0 {
        return Err(Error::Config("no loss-masked positions to evaluate".into()));
    }
    Ok(count.fraction())
}

/// `-log softmax(row)[target]`.
pub fn token_nll(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    lse - row[target]
}

/// Mean per-token negative log-likelihood (nats) over non-overlapping
/// windows of `l_eval` bytes. Only the first `floor((N-1)/l_eval)` windows
/// are used, so every prediction has a full-length context window.
pub fn eval_nll_at_length(
    model: &impl Predictor,
    text: &[u8],
    l_eval: usize,
    exec: Exec,
) -> Result<f64> {
    if l_eval < 2 {
        return Err(Error::Config(format!(
            "evaluation length must be at least 2, got {l_eval}"
        )));
    }
    let n_windows = text.len().saturating_sub(1) / l_eval;
    if n_windows == 0 {
        return Err(Error::Config(format!(
            "held-out text of {} bytes is too short for length {l_eval}",
            text.len()
        )));
    }
    let sums = exec.map(n_windows, |w| -> Result<f64> {
        let s = w * l_eval;
        let tokens: Vec<usize> = text[s..s + l_eval].iter().map(|&b| b as usize).collect();
        let logits = model.logits(&tokens)?;
        Ok((0..l_eval)
            .map(|t| token_nll(logits.row(t), text[s + t + 1] as usize))
            .sum())
    });
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    let mean = total / (n_windows * l_eval) as f64;
    if !mean.is_finite() {
        return Err(Error::domain(
            "eval_nll_at_length",
            format!("non-finite NLL {mean}"),
        ));
    }
    Ok(mean)
}
