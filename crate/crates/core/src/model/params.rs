use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::config::{AttentionVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub const CHECKPOINT_FORMAT: &str = "stickbreaking-checkpoint/1";

/// Named parameter tensors in a fixed insertion order.
///
/// Paths look like `embed`, `layers.0.attn.wq`, `layers.1.mlp.b_in`,
/// `final_norm.gain`, `unembed`. Row vectors (biases, gains) are `1 × n`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelParams {
    tensors: IndexMap<String, Matrix>,
}

/// Gradients share the parameter layout.
pub type ParamGrads = ModelParams;

pub(crate) fn layer_path(layer: usize, name: &str) -> String {
    format!("layers.{layer}.{name}")
}

impl FromIterator<(String, Matrix)> for ModelParams {
    fn from_iter<I: IntoIterator<Item = (String, Matrix)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

impl ModelParams {
    /// Fresh parameters: `N(0, init_std)` for embeddings and projections,
    /// unit gains, zero biases and zero remainder vectors.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let std = cfg.init_std;
        let d = cfg.d_model;
        let a = &cfg.attn;
        let mut p = Self::default();
        p.insert("embed", rng.normal_matrix(cfg.vocab, d, std));
        for l in 0..cfg.n_layer {
            p.insert(&layer_path(l, "norm1.gain"), Matrix::filled(1, d, 1.0));
            p.insert(&layer_path(l, "norm1.bias"), Matrix::zeros(1, d));
            for w in ["attn.wq", "attn.wk", "attn.wv"] {
                p.insert(&layer_path(l, w), rng.normal_matrix(d, a.width(), std));
            }
            p.insert(
                &layer_path(l, "attn.wo"),
                rng.normal_matrix(a.width(), d, std),
            );
            if a.variant == AttentionVariant::SbRemainderBias {
                p.insert(
                    &layer_path(l, "attn.remainder"),
                    Matrix::zeros(a.n_head, a.d_head),
                );
            }
            if a.group_norm {
                p.insert(
                    &layer_path(l, "attn.gn.gain"),
                    Matrix::filled(a.n_head, a.d_head, 1.0),
                );
                p.insert(
                    &layer_path(l, "attn.gn.bias"),
                    Matrix::zeros(a.n_head, a.d_head),
                );
            }
            p.insert(&layer_path(l, "norm2.gain"), Matrix::filled(1, d, 1.0));
            p.insert(&layer_path(l, "norm2.bias"), Matrix::zeros(1, d));
            p.insert(
                &layer_path(l, "mlp.w_in"),
                rng.normal_matrix(d, cfg.d_inter, std),
            );
            p.insert(&layer_path(l, "mlp.b_in"), Matrix::zeros(1, cfg.d_inter));
            p.insert(
                &layer_path(l, "mlp.w_out"),
                rng.normal_matrix(cfg.d_inter, d, std),
            );
            p.insert(&layer_path(l, "mlp.b_out"), Matrix::zeros(1, d));
        }
        p.insert("final_norm.gain", Matrix::filled(1, d, 1.0));
        p.insert("final_norm.bias", Matrix::zeros(1, d));
        p.insert("unembed", rng.normal_matrix(d, cfg.vocab, std));
        Ok(p)
    }

    fn insert(&mut self, path: &str, m: Matrix) {
        self.tensors.insert(path.to_string(), m);
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, m)| (k.clone(), Matrix::zeros(m.rows(), m.cols())))
                .collect(),
        }
    }

    pub fn get(&self, path: &str) -> Result<&Matrix> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Matrix> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(|m| m.rows() * m.cols()).sum()
    }

    fn check_layout(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.tensors.len() != other.tensors.len()
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|((ka, a), (kb, b))| ka != kb || a.shape() != b.shape())
        {
            return Err(Error::shape(op, "parameter sets have different layouts"));
        }
        Ok(())
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, other: &Self, alpha: f64) -> Result<()> {
        self.check_layout(other, "ModelParams::add_scaled")?;
        for (a, b) in self.tensors.values_mut().zip(other.tensors.values()) {
            a.add_scaled(b, alpha);
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for m in self.tensors.values_mut() {
            m.scale(alpha);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .map(Matrix::norm_sq)
            .sum::<f64>()
            .sqrt()
    }

    /// Path of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, m)| !m.is_finite())
            .map(|(k, _)| k.as_str())
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .values()
            .map(Matrix::max_abs)
            .fold(0.0, f64::max)
    }

    pub fn save(&self, cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(
            file,
            &CheckpointRef {
                format: CHECKPOINT_FORMAT,
                config: cfg,
                params: self,
            },
        )?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(ModelConfig, Self)> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Checkpoint = serde_json::from_reader(file)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "unsupported checkpoint format `{}`",
                ck.format
            )));
        }
        let expected = Self::init(&ck.config, 0)?;
        expected.check_layout(&ck.params, "ModelParams::load")?;
        Ok((ck.config, ck.params))
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format: &'a str,
    config: &'a ModelConfig,
    params: &'a ModelParams,
}

#[derive(Deserialize)]
struct Checkpoint {
    format: String,
    config: ModelConfig,
    params: ModelParams,
}
