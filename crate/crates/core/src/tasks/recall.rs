//! Associative-recall sequences.
//!
//! MQAR: `n_kv` assignments `var val`, then every assigned variable once in
//! random order; the label at each query is its value.
//!
//! MQRAR: `n_kv` assignments, then `n_queries` steps `var val` where the
//! variable is read (label = its current value) and immediately reassigned.

use serde::{Deserialize, Serialize};

use super::instance::{TaskInstance, TaskMeta};
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Rng};
use crate::parallel::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RecallTask {
    Mqar { n_kv: usize },
    Mqrar { n_kv: usize, n_queries: usize },
}

impl RecallTask {
    pub fn n_kv(&self) -> usize {
        match *self {
            RecallTask::Mqar { n_kv } | RecallTask::Mqrar { n_kv, .. } => n_kv,
        }
    }

    pub fn seq_len(&self) -> usize {
        match *self {
            RecallTask::Mqar { n_kv } => 3 * n_kv,
            RecallTask::Mqrar { n_kv, n_queries } => 2 * (n_kv + n_queries),
        }
    }

    pub fn generate(&self, vocab: &Vocab, seed: u64) -> Result<TaskInstance> {
        match *self {
            RecallTask::Mqar { n_kv } => gen_mqar(vocab, n_kv, seed),
            RecallTask::Mqrar { n_kv, n_queries } => gen_mqrar(vocab, n_kv, n_queries, seed),
        }
    }

    /// `count` instances; instance `i` uses seed `derive_seed(base_seed, i)`,
    /// so the batch does not depend on the worker count.
    pub fn batch(
        &self,
        vocab: &Vocab,
        count: usize,
        base_seed: u64,
        exec: Exec,
    ) -> Result<Vec<TaskInstance>> {
        exec.map(count, |i| {
            self.generate(vocab, derive_seed(base_seed, i as u64))
        })
        .into_iter()
        .collect()
    }
}

fn check_counts(vocab: &Vocab, n_kv: usize) -> Result<()> {
    if n_kv == 0 {
        return Err(Error::Config("n_kv must be at least 1".into()));
    }
    if n_kv > vocab.n_vars {
        return Err(Error::Config(format!(
            "n_kv = {n_kv} exceeds the {} available variables",
            vocab.n_vars
        )));
    }
    Ok(())
}

/// Distinct variables with values drawn with replacement.
fn initial_pairs(vocab: &Vocab, n_kv: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut vars: Vec<usize> = (0..vocab.n_vars).collect();
    rng.shuffle(&mut vars);
    vars.truncate(n_kv);
    vars.into_iter()
        .map(|v| (v, rng.below(vocab.n_vals)))
        .collect()
}

pub fn gen_mqar(vocab: &Vocab, n_kv: usize, seed: u64) -> Result<TaskInstance> {
    check_counts(vocab, n_kv)?;
    let mut rng = Rng::new(seed);
    let pairs = initial_pairs(vocab, n_kv, &mut rng);
    let mut order: Vec<usize> = (0..n_kv).collect();
    rng.shuffle(&mut order);
    let phi = vocab.null();
    let mut tokens = Vec::with_capacity(3 * n_kv);
    let mut targets = Vec::with_capacity(3 * n_kv);
    let mut mask = Vec::with_capacity(3 * n_kv);
    for &(var, val) in &pairs {
        tokens.extend([vocab.var(var), vocab.val(val)]);
        targets.extend([phi, phi]);
        mask.extend([false, false]);
    }
    for &i in &order {
        let (var, val) = pairs[i];
        tokens.push(vocab.var(var));
        targets.push(vocab.val(val));
        mask.push(true);
    }
    let meta = TaskMeta {
        n_kv,
        n_queries: n_kv,
        seed,
    };
    TaskInstance::new(tokens, targets, mask, meta)
}

/// Query variables are drawn uniformly from the assigned set; the value
/// token of the preceding pair always separates a query from the last write
/// to its variable.
pub fn gen_mqrar(vocab: &Vocab, n_kv: usize, n_queries: usize, seed: u64) -> Result<TaskInstance> {
    check_counts(vocab, n_kv)?;
    if n_queries == 0 {
        return Err(Error::Config("n_queries must be at least 1".into()));
    }
    let mut rng = Rng::new(seed);
    let initial = initial_pairs(vocab, n_kv, &mut rng);
    let steps: Vec<(usize, usize)> = (0..n_queries)
        .map(|_| (initial[rng.below(n_kv)].0, rng.below(vocab.n_vals)))
        .collect();
    let mut inst = mqrar_from_pairs(vocab, &initial, &steps)?;
    inst.meta.seed = seed;
    Ok(inst)
}

/// Build an MQRAR sequence from explicit assignments and query steps.
pub fn mqrar_from_pairs(
    vocab: &Vocab,
    initial: &[(usize, usize)],
    steps: &[(usize, usize)],
) -> Result<TaskInstance> {
    let mut current = vec![None; vocab.n_vars];
    let phi = vocab.null();
    let n = 2 * (initial.len() + steps.len());
    let mut tokens = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for &(var, val) in initial {
        if var >= vocab.n_vars || val >= vocab.n_vals {
            return Err(Error::Config(format!(
                "pair ({var}, {val}) outside the vocabulary"
            )));
        }
        if current[var].is_some() {
            return Err(Error::Config(format!(
                "variable {var} assigned twice in the first segment"
            )));
        }
        current[var] = Some(val);
        tokens.extend([vocab.var(var), vocab.val(val)]);
        targets.extend([phi, phi]);
        mask.extend([false, false]);
    }
    for &(var, val) in steps {
        if var >= vocab.n_vars || val >= vocab.n_vals {
            return Err(Error::Config(format!(
                "pair ({var}, {val}) outside the vocabulary"
            )));
        }
        let old = current[var]
            .ok_or_else(|| Error::Config(format!("query of unassigned variable {var}")))?;
        tokens.extend([vocab.var(var), vocab.val(val)]);
        targets.extend([vocab.val(old), phi]);
        mask.extend([true, false]);
        current[var] = Some(val);
    }
    let meta = TaskMeta {
        n_kv: initial.len(),
        n_queries: steps.len(),
        seed: 0,
    };
    TaskInstance::new(tokens, targets, mask, meta)
}

/// Prefix `inst` with filler tokens up to `len` positions.
pub fn pad_with_filler(inst: &TaskInstance, vocab: &Vocab, len: usize) -> Result<TaskInstance> {
    let filler = vocab
        .filler_id()
        .ok_or_else(|| Error::Config("vocabulary has no filler token".into()))?;
    if len < inst.len() {
        return Err(Error::Config(format!(
            "cannot pad a length-{} sequence to {len}",
            inst.len()
        )));
    }
    let pad = len - inst.len();
    let mut tokens = vec![filler; pad];
    tokens.extend_from_slice(&inst.tokens);
    let mut targets = vec![vocab.null(); pad];
    targets.extend_from_slice(&inst.targets);
    let mut mask = vec![false; pad];
    mask.extend_from_slice(&inst.loss_mask);
    TaskInstance::new(tokens, targets, mask, inst.meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    /// Walk the sequence left to right with an assignment dictionary and
    /// return the expected label at every position.
    fn replay(vocab: &Vocab, tokens: &[usize]) -> Vec<Option<usize>> {
        let mut dict = HashMap::new();
        let mut labels = vec![None; tokens.len()];
        let mut t = 0;
        while t < tokens.len() {
            let var = tokens[t];
            assert!(vocab.is_var(var));
            match tokens.get(t + 1).filter(|&&x| vocab.is_val(x)) {
                Some(&val) => {
                    labels[t] = dict.get(&var).copied();
                    dict.insert(var, val);
                    t += 2;
                }
                None => {
                    labels[t] = dict.get(&var).copied();
                    t += 1;
                }
            }
        }
        labels
    }

    #[test]
    fn mqar_single_pair() {
        let v = Vocab::standard();
        let inst = gen_mqar(&v, 1, 3).unwrap();
        assert_eq!(inst.len(), 3);
        assert_eq!(inst.tokens[0], inst.tokens[2]);
        assert_eq!(inst.targets[2], inst.tokens[1]);
        assert_eq!(inst.loss_mask, vec![false, false, true]);
    }

    #[test]
    fn mqar_is_deterministic_and_replayable() {
        let v = Vocab::standard();
        assert_eq!(gen_mqar(&v, 4, 9).unwrap(), gen_mqar(&v, 4, 9).unwrap());
        for seed in 0..50 {
            let inst = gen_mqar(&v, 16, seed).unwrap();
            let labels = replay(&v, &inst.tokens);
            for t in inst.masked_positions() {
                assert_eq!(Some(inst.targets[t]), labels[t]);
            }
            assert_eq!(inst.n_masked(), 16);
            let vars: std::collections::HashSet<_> = inst.tokens[..32].iter().step_by(2).collect();
            assert_eq!(vars.len(), 16);
        }
        assert!(gen_mqar(&v, 27, 0).is_err());
    }

    #[test]
    fn worked_example() {
        let v = Vocab::standard();
        let initial = v.parse_pairs("B6 P4 E3 X1 Z2").unwrap();
        let steps = v.parse_pairs("E2 B1 E5 B4").unwrap();
        let inst = mqrar_from_pairs(&v, &initial, &steps).unwrap();
        let labels: Vec<String> = inst
            .masked_positions()
            .map(|t| v.render_token(inst.targets[t]))
            .collect();
        assert_eq!(labels, ["3", "6", "2", "1"]);
        assert_eq!(inst.len(), 18);
    }

    #[test]
    fn single_query_reads_initial_value() {
        let v = Vocab::standard();
        let inst = gen_mqrar(&v, 1, 1, 5).unwrap();
        assert_eq!(inst.targets[2], inst.tokens[1]);
    }

    #[test]
    fn mqrar_matches_replay_oracle() {
        let v = Vocab::for_pairs(16);
        for seed in 0..1000 {
            let inst = gen_mqrar(&v, 16, 16, seed).unwrap();
            assert_eq!(inst.len(), 64);
            let labels = replay(&v, &inst.tokens);
            for t in 0..inst.len() {
                if inst.loss_mask[t] {
                    assert_eq!(Some(inst.targets[t]), labels[t], "seed {seed} pos {t}");
                } else {
                    assert_eq!(inst.targets[t], v.null());
                }
            }
        }
    }

    #[test]
    fn distractor_between_query_and_last_write() {
        let v = Vocab::standard();
        for seed in 0..300 {
            let inst = gen_mqrar(&v, 3, 20, seed).unwrap();
            for t in inst.masked_positions() {
                let var = inst.tokens[t];
                let last = (0..t)
                    .rev()
                    .find(|&p| p % 2 == 0 && inst.tokens[p] == var)
                    .unwrap();
                assert!(
                    t - last >= 2,
                    "seed {seed}: query at {t}, last write at {last}"
                );
                assert!(!inst.loss_mask[t - 1]);
            }
        }
    }

    #[test]
    fn batch_uses_derived_seeds() {
        let v = Vocab::standard();
        let task = RecallTask::Mqrar {
            n_kv: 5,
            n_queries: 5,
        };
        let a = task.batch(&v, 6, 42, Exec::Sequential).unwrap();
        let b = task.batch(&v, 6, 42, Exec::threads(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[2], task.generate(&v, derive_seed(42, 2)).unwrap());
        assert_eq!(task.seq_len(), a[0].len());
    }

    #[test]
    fn filler_prefix() {
        let v = Vocab::standard().with_filler();
        let inst = gen_mqrar(&v, 4, 4, 1).unwrap();
        let padded = pad_with_filler(&inst, &v, 30).unwrap();
        assert_eq!(padded.len(), 30);
        assert_eq!(padded.tokens[0], 37);
        assert_eq!(padded.n_masked(), inst.n_masked());
        assert!(pad_with_filler(&inst, &Vocab::standard(), 30).is_err());
    }
}
