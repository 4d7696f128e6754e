use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamGrads};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied to weight matrices only.
    pub weight_decay: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamConfig {
    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0)
            || !in_unit(self.beta1)
            || !in_unit(self.beta2)
            || !(self.eps > 0.0)
            || self.weight_decay < 0.0
        {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// Whether decoupled weight decay applies to a parameter path: projection
/// matrices and embeddings, not gains, biases or the remainder vectors.
pub fn decays(path: &str) -> bool {
    let leaf = path.rsplit('.').next().unwrap_or(path);
    leaf.starts_with('w') || leaf == "embed" || leaf == "unembed"
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clip_factor: f64,
}

/// Scale `grads` in place to global norm at most `max_norm`. Returns the
/// norm before clipping and the factor `min(1, max_norm / norm)`.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> (f64, f64) {
    let norm = grads.global_norm();
    let factor = if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    };
    if factor < 1.0 {
        grads.scale(factor);
    }
    (norm, factor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl OptimState {
    pub fn new(cfg: AdamConfig, params: &ModelParams) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        })
    }
}

/// One bias-corrected Adam update at the configured learning rate.
pub fn adam_step(
    params: &mut ModelParams,
    grads: ParamGrads,
    state: &mut OptimState,
) -> Result<StepInfo> {
    let lr = state.cfg.lr;
    adam_step_lr(params, grads, state, lr)
}

/// Adam update at an explicit learning rate (used with schedules). The
/// gradient is rejected before any state changes if it has a non-finite
/// entry.
pub fn adam_step_lr(
    params: &mut ModelParams,
    mut grads: ParamGrads,
    state: &mut OptimState,
    lr: f64,
) -> Result<StepInfo> {
    if let Some(path) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient {
            path: path.to_string(),
        });
    }
    if grads.len() != params.len() || grads.paths().zip(params.paths()).any(|(a, b)| a != b) {
        return Err(Error::shape(
            "adam_step",
            "gradient layout differs from parameters",
        ));
    }
    let (grad_norm, clip_factor) = match state.cfg.clip_norm {
        Some(c) => clip_global_norm(&mut grads, c),
        None => (grads.global_norm(), 1.0),
    };
    let AdamConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
        ..
    } = state.cfg;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((path, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments)
    {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("`{path}`: {:?} vs {:?}", p.shape(), g.shape()),
            ));
        }
        let wd = if decays(path) { weight_decay } else { 0.0 };
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
        }
    }
    Ok(StepInfo {
        grad_norm,
        clip_factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn single(x: f64) -> ModelParams {
        [("w".to_string(), Matrix::filled(1, 1, x))]
            .into_iter()
            .collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.5);
        let mut st = OptimState::new(AdamConfig::default(), &p).unwrap();
        st.m = single(0.2);
        st.v = single(0.3);
        adam_step(&mut p, single(0.0), &mut st).unwrap();
        assert!((st.m.get("w").unwrap()[(0, 0)] - 0.18).abs() < 1e-15);
        assert!((st.v.get("w").unwrap()[(0, 0)] - 0.3 * 0.95).abs() < 1e-15);
        let mut p = single(0.5);
        let mut st = OptimState::new(AdamConfig::default(), &p).unwrap();
        adam_step(&mut p, single(0.0), &mut st).unwrap();
        assert_eq!(p, single(0.5));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn analytic_first_step() {
        let cfg = AdamConfig {
            clip_norm: None,
            ..AdamConfig::default().with_lr(3e-3)
        };
        let mut p = single(1.0);
        let mut st = OptimState::new(cfg, &p).unwrap();
        adam_step(&mut p, single(1.0), &mut st).unwrap();
        let m_hat = st.m.get("w").unwrap()[(0, 0)] / (1.0 - 0.9);
        let v_hat = st.v.get("w").unwrap()[(0, 0)] / (1.0 - 0.95);
        assert!((m_hat / v_hat.sqrt() - 1.0).abs() < 1e-12);
        let delta = 1.0 - p.get("w").unwrap()[(0, 0)];
        assert!(
            (delta - cfg.lr).abs() <= cfg.lr * cfg.eps + 1e-15,
            "{delta}"
        );
    }

    #[test]
    fn clipping_preserves_direction() {
        let mut g: ModelParams = [("w", 3.0), ("b", 4.0)]
            .into_iter()
            .map(|(k, x)| (k.to_string(), Matrix::filled(1, 1, x)))
            .collect();
        let before = g.clone();
        let (norm, factor) = clip_global_norm(&mut g, 1.0);
        assert!((norm - 5.0).abs() < 1e-15);
        assert!((factor - 0.2).abs() < 1e-15);
        for ((_, a), (_, b)) in g.iter().zip(before.iter()) {
            assert!((a[(0, 0)] - b[(0, 0)] * 0.2).abs() < 1e-15);
        }
        let mut small = single(0.5);
        assert_eq!(clip_global_norm(&mut small, 1.0), (0.5, 1.0));
        assert_eq!(small, single(0.5));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p: ModelParams = [
            ("w".to_string(), Matrix::filled(1, 1, 1.0)),
            ("layers.0.mlp.b_in".to_string(), Matrix::zeros(1, 2)),
        ]
        .into_iter()
        .collect();
        let mut g = p.zeros_like();
        g.get_mut("layers.0.mlp.b_in").unwrap()[(0, 1)] = f64::NAN;
        let mut st = OptimState::new(AdamConfig::default(), &p).unwrap();
        match adam_step(&mut p, g, &mut st) {
            Err(Error::NonFiniteGradient { path }) => assert_eq!(path, "layers.0.mlp.b_in"),
            other => panic!("{other:?}"),
        }
        assert_eq!(st.step, 0);
    }

    #[test]
    fn decoupled_decay_targets_weights() {
        assert!(decays("layers.1.attn.wq") && decays("embed") && decays("layers.0.mlp.w_in"));
        assert!(
            !decays("layers.0.norm1.gain")
                && !decays("layers.0.mlp.b_out")
                && !decays("layers.0.attn.remainder")
        );
        let cfg = AdamConfig::default().with_weight_decay(0.1).with_lr(0.01);
        let mut p = single(2.0);
        let mut st = OptimState::new(cfg, &p).unwrap();
        adam_step(&mut p, single(0.0), &mut st).unwrap();
        assert!((p.get("w").unwrap()[(0, 0)] - (2.0 - 0.01 * 0.1 * 2.0)).abs() < 1e-15);
    }

    /// Plain-scalar Adam on f(x) = (x - 3)² / 2.
    fn scalar_adam(x0: f64, lr: f64, steps: usize) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.95f64, 1e-8);
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = x - 3.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t as i32)))
                / ((v / (1.0 - b2.powi(t as i32))).sqrt() + eps);
            out.push(x);
        }
        out
    }

    #[test]
    fn quadratic_matches_scalar_oracle() {
        let cfg = AdamConfig {
            clip_norm: None,
            ..AdamConfig::default().with_lr(0.05)
        };
        let mut p = single(-1.0);
        let mut st = OptimState::new(cfg, &p).unwrap();
        let oracle = scalar_adam(-1.0, 0.05, 100);
        let mut losses = Vec::new();
        for want in &oracle {
            let x = p.get("w").unwrap()[(0, 0)];
            adam_step(&mut p, single(x - 3.0), &mut st).unwrap();
            let got = p.get("w").unwrap()[(0, 0)];
            assert!((got - want).abs() < 1e-12);
            losses.push((got - 3.0).powi(2) / 2.0);
        }
        assert!(losses.windows(2).take(60).all(|w| w[1] < w[0]));
        assert!(losses[99] < losses[0]);
    }
}
