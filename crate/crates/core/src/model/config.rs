use serde::{Deserialize, Serialize};

use crate::blocked::DEFAULT_BLOCK;
use crate::error::{Error, Result};
use crate::reference::{PositionKind, PositionScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    /// Plain stick-breaking; unallocated mass is dropped.
    Sb,
    /// Unallocated mass goes to the query's own value vector.
    SbRemainder,
    /// Unallocated mass goes to a learned per-head vector.
    SbRemainderBias,
    Softmax,
}

impl AttentionVariant {
    pub fn is_stick_breaking(&self) -> bool {
        !matches!(self, AttentionVariant::Softmax)
    }
}

/// How stick-breaking heads are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttnPath {
    /// Dense O(L²) reference implementation.
    #[default]
    Reference,
    /// Tiled kernel with the given block size.
    Blocked { block: usize },
}

impl AttnPath {
    pub fn blocked() -> Self {
        AttnPath::Blocked {
            block: DEFAULT_BLOCK,
        }
    }
}

fn default_gn_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub n_head: usize,
    pub d_head: usize,
    pub variant: AttentionVariant,
    #[serde(default = "PositionScheme::none")]
    pub scheme: PositionScheme,
    #[serde(default)]
    pub group_norm: bool,
    #[serde(default = "default_gn_eps")]
    pub gn_eps: f64,
    #[serde(default)]
    pub path: AttnPath,
}

impl AttentionConfig {
    pub fn new(n_head: usize, d_head: usize, variant: AttentionVariant) -> Self {
        Self {
            n_head,
            d_head,
            variant,
            scheme: PositionScheme::none(),
            group_norm: false,
            gn_eps: default_gn_eps(),
            path: AttnPath::Reference,
        }
    }

    pub fn with_scheme(mut self, scheme: PositionScheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_group_norm(mut self, on: bool) -> Self {
        self.group_norm = on;
        self
    }

    pub fn with_path(mut self, path: AttnPath) -> Self {
        self.path = path;
        self
    }

    pub fn width(&self) -> usize {
        self.n_head * self.d_head
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_head == 0 || self.d_head == 0 {
            return Err(Error::Config(
                "attention needs at least one head of width ≥ 1".into(),
            ));
        }
        if self.variant.is_stick_breaking() && self.scheme.kind != PositionKind::None {
            return Err(Error::Config(format!(
                "stick-breaking variant {:?} takes no position scheme, got {:?}",
                self.variant, self.scheme.kind
            )));
        }
        if self.variant.is_stick_breaking() && self.scheme.window.is_some() {
            return Err(Error::Config(
                "sliding windows apply to softmax attention only".into(),
            ));
        }
        if self.group_norm && self.d_head < 2 {
            return Err(Error::Config("group norm needs d_head ≥ 2".into()));
        }
        if !(self.gn_eps > 0.0) {
            return Err(Error::Config(format!(
                "gn_eps must be positive, got {}",
                self.gn_eps
            )));
        }
        if let AttnPath::Blocked { block } = self.path {
            if block == 0 {
                return Err(Error::Config("block size must be positive".into()));
            }
        }
        self.scheme.validate()
    }
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layer: usize,
    pub d_inter: usize,
    pub attn: AttentionConfig,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl ModelConfig {
    /// Single-head model with `d_head = d_model`.
    pub fn single_head(
        vocab: usize,
        d_model: usize,
        n_layer: usize,
        d_inter: usize,
        variant: AttentionVariant,
    ) -> Self {
        Self {
            vocab,
            d_model,
            n_layer,
            d_inter,
            attn: AttentionConfig::new(1, d_model, variant),
            init_std: default_init_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 || self.n_layer == 0 || self.d_inter == 0 {
            return Err(Error::Config(
                "vocab, d_model, n_layer and d_inter must be positive".into(),
            ));
        }
        if self.attn.width() != self.d_model {
            return Err(Error::Config(format!(
                "d_model {} must equal n_head × d_head = {}",
                self.d_model,
                self.attn.width()
            )));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::Config(format!(
                "init_std must be non-negative, got {}",
                self.init_std
            )));
        }
        self.attn.validate()
    }
}
