use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TaskMeta {
    pub n_kv: usize,
    pub n_queries: usize,
    pub seed: u64,
}

/// One training or evaluation sequence. `targets[t]` is the label for the
/// prediction made at position `t`; positions with `loss_mask[t] == false`
/// carry a null target and are ignored by the loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub meta: TaskMeta,
}

impl TaskInstance {
    pub fn new(
        tokens: Vec<usize>,
        targets: Vec<usize>,
        loss_mask: Vec<bool>,
        meta: TaskMeta,
    ) -> Result<Self> {
        let inst = Self {
            tokens,
            targets,
            loss_mask,
            meta,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_masked(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Positions where the loss is computed.
    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.loss_mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.targets.len() || self.tokens.len() != self.loss_mask.len() {
            return Err(Error::shape(
                "TaskInstance",
                format!(
                    "tokens {}, targets {}, mask {}",
                    self.tokens.len(),
                    self.targets.len(),
                    self.loss_mask.len()
                ),
            ));
        }
        Ok(())
    }
}

pub fn write_jsonl<'a>(
    out: impl Write,
    instances: impl IntoIterator<Item = &'a TaskInstance>,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(out);
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(input: impl BufRead) -> Result<Vec<TaskInstance>> {
    let mut all = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: TaskInstance = serde_json::from_str(&line)?;
        inst.validate()?;
        all.push(inst);
    }
    Ok(all)
}
