use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token ids for the recall tasks.
///
/// Layout: variables `0 .. n_vars`, values `n_vars .. n_vars + n_vals`,
/// then the null target `φ`, then the filler token when enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_vars: usize,
    pub n_vals: usize,
    #[serde(default)]
    pub filler: bool,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocab {
    /// 26 letter variables, 10 digit values, no filler.
    pub fn standard() -> Self {
        Self {
            n_vars: 26,
            n_vals: 10,
            filler: false,
        }
    }

    pub fn new(n_vars: usize, n_vals: usize) -> Result<Self> {
        if n_vars == 0 || n_vals == 0 {
            return Err(Error::Config(
                "vocabulary needs at least one variable and one value".into(),
            ));
        }
        Ok(Self {
            n_vars,
            n_vals,
            filler: false,
        })
    }

    pub fn with_filler(mut self) -> Self {
        self.filler = true;
        self
    }

    /// Smallest standard-style vocabulary with room for `n_kv` variables.
    pub fn for_pairs(n_kv: usize) -> Self {
        Self {
            n_vars: n_kv.max(26),
            ..Self::standard()
        }
    }

    pub fn var(&self, i: usize) -> usize {
        debug_assert!(i < self.n_vars);
        i
    }

    pub fn val(&self, i: usize) -> usize {
        debug_assert!(i < self.n_vals);
        self.n_vars + i
    }

    pub fn null(&self) -> usize {
        self.n_vars + self.n_vals
    }

    pub fn filler_id(&self) -> Option<usize> {
        self.filler.then(|| self.null() + 1)
    }

    pub fn size(&self) -> usize {
        self.null() + 1 + usize::from(self.filler)
    }

    pub fn is_var(&self, id: usize) -> bool {
        id < self.n_vars
    }

    pub fn is_val(&self, id: usize) -> bool {
        (self.n_vars..self.n_vars + self.n_vals).contains(&id)
    }

    pub fn value_ids(&self) -> std::ops::Range<usize> {
        self.n_vars..self.n_vars + self.n_vals
    }

    /// Human-readable token: letters for the first 26 variables, digits for
    /// the first 10 values.
    pub fn render_token(&self, id: usize) -> String {
        if self.is_var(id) {
            if id < 26 {
                char::from(b'A' + id as u8).to_string()
            } else {
                format!("v{id}")
            }
        } else if self.is_val(id) {
            let v = id - self.n_vars;
            if self.n_vals <= 10 {
                v.to_string()
            } else {
                format!("#{v}")
            }
        } else if id == self.null() {
            "φ".into()
        } else if Some(id) == self.filler_id() {
            "_".into()
        } else {
            format!("<{id}>")
        }
    }

    /// Parse whitespace-separated pairs such as `B6 P4 E3` (letter variable
    /// followed by a single digit value).
    pub fn parse_pairs(&self, text: &str) -> Result<Vec<(usize, usize)>> {
        text.split_whitespace()
            .map(|pair| {
                let mut chars = pair.chars();
                let (Some(var), Some(val), None) = (chars.next(), chars.next(), chars.next())
                else {
                    return Err(Error::Config(format!(
                        "expected a letter and a digit, got `{pair}`"
                    )));
                };
                let var = (var.is_ascii_uppercase())
                    .then(|| var as usize - 'A' as usize)
                    .filter(|&v| v < self.n_vars)
                    .ok_or_else(|| Error::Config(format!("bad variable in `{pair}`")))?;
                let val = val
                    .to_digit(10)
                    .map(|v| v as usize)
                    .filter(|&v| v < self.n_vals)
                    .ok_or_else(|| Error::Config(format!("bad value in `{pair}`")))?;
                Ok((var, val))
            })
            .collect()
    }
}
