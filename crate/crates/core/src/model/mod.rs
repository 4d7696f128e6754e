//! Toy decoder-only transformer with a hand-written backward pass.
//!
//! Sublayers are pre-norm residual blocks (LayerNorm, multi-head attention,
//! GELU MLP). Attention heads are either stick-breaking (reference or tiled
//! kernel, optionally with remainder handling and a head-wise norm) or one of
//! the softmax baselines.

mod attention;
mod config;
mod layers;
mod network;
mod params;
mod transformer;

pub use attention::{mha_backward, mha_forward, MhaCache, MhaGrads, MhaParams};
pub use config::{AttentionConfig, AttentionVariant, AttnPath, ModelConfig};
pub use layers::{
    gelu, gelu_grad, head_group_norm, layer_norm, layer_norm_backward, linear, linear_backward,
    NormCache, NORM_EPS,
};
pub use network::Model;
pub use params::{ModelParams, ParamGrads, CHECKPOINT_FORMAT};
pub use transformer::{
    transformer_backward, transformer_forward, transformer_forward_batch, ForwardCache,
};
