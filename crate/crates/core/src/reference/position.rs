use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionKind {
    None,
    Rope,
    Alibi,
}

/// Position information for the softmax baselines. Stick-breaking heads
/// always use [`PositionKind::None`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionScheme {
    pub kind: PositionKind,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// RoPE scaling factor `f`: positions are divided by `f` before rotation.
    #[serde(default = "default_rope_scale")]
    pub rope_scale: f64,
    /// Sliding-window width `W`: query `j` sees keys `i` with `j − i < W`.
    #[serde(default)]
    pub window: Option<usize>,
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_rope_scale() -> f64 {
    1.0
}

impl Default for PositionScheme {
    fn default() -> Self {
        Self::none()
    }
}

impl PositionScheme {
    pub fn none() -> Self {
        Self {
            kind: PositionKind::None,
            rope_base: default_rope_base(),
            rope_scale: default_rope_scale(),
            window: None,
        }
    }

    pub fn rope() -> Self {
        Self {
            kind: PositionKind::Rope,
            ..Self::none()
        }
    }

    pub fn rope_scaled(factor: f64) -> Self {
        Self {
            rope_scale: factor,
            ..Self::rope()
        }
    }

    pub fn alibi() -> Self {
        Self {
            kind: PositionKind::Alibi,
            ..Self::none()
        }
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = Some(window);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rope_base > 1.0) || !(self.rope_scale >= 1.0) {
            return Err(Error::Config(format!(
                "rope base {} must exceed 1 and scale {} must be at least 1",
                self.rope_base, self.rope_scale
            )));
        }
        if self.window == Some(0) {
            return Err(Error::Config("sliding window must be at least 1".into()));
        }
        Ok(())
    }
}

/// ALiBi slope for head `head` (0-based) of `n_heads`: `2^(−8(h+1)/H)`.
pub fn alibi_slope(head: usize, n_heads: usize) -> f64 {
    2f64.powf(-8.0 * (head + 1) as f64 / n_heads as f64)
}

/// Additive ALiBi logit bias `−m·(j − i)` for key `i`, query `j`.
pub fn alibi_bias(slope: f64, key: usize, query: usize) -> f64 {
    -slope * (query as f64 - key as f64)
}

fn rotate(x: &Matrix, scheme: &PositionScheme, sign: f64) -> Result<Matrix> {
    let (n, d) = x.shape();
    if d % 2 != 0 {
        return Err(Error::shape(
            "rope_rotate",
            format!("head dimension {d} must be even"),
        ));
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| scheme.rope_base.powf(-2.0 * k as f64 / d as f64))
        .collect();
    let mut out = Matrix::zeros(n, d);
    for p in 0..n {
        let pos = p as f64 / scheme.rope_scale;
        let src = x.row(p);
        let dst = out.row_mut(p);
        for (k, &theta) in freqs.iter().enumerate() {
            let (s, c) = (sign * theta * pos).sin_cos();
            let (a, b) = (src[2 * k], src[2 * k + 1]);
            dst[2 * k] = a * c - b * s;
            dst[2 * k + 1] = a * s + b * c;
        }
    }
    Ok(out)
}

/// Rotate each consecutive pair `(2k, 2k+1)` of row `p` by angle
/// `θ_k · p / f`, `θ_k = base^(−2k/d)`.
pub fn rope_rotate(x: &Matrix, scheme: &PositionScheme) -> Result<Matrix> {
    rotate(x, scheme, 1.0)
}

/// Inverse rotation (also the transpose, used to pull gradients back).
pub fn rope_rotate_inverse(x: &Matrix, scheme: &PositionScheme) -> Result<Matrix> {
    rotate(x, scheme, -1.0)
}
