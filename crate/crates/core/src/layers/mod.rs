//! Graph convolutions, attention, the two residual blocks and the assembled
//! model.
//!
//! Parameter names follow a dotted path scheme that doubles as the checkpoint
//! entry name, e.g. `blocks.3.graatt.mhsa.qkv.weight` or
//! `blocks.0.cheb.conv2.bias`.

mod attention;
mod blocks;
mod conv;
mod model;
mod params;

pub use attention::{LayerNorm, MultiHeadSelfAttention, LAYER_NORM_EPS};
pub use blocks::{ChebGConvBlock, GraAttention};
pub use conv::{ChebGConv, LamGConv, ADJACENCY_INIT_LOGIT};
pub use model::{GraFormer, ModelConfig, Stage};
pub use params::{Forward, Param, ParamGrads, ParamId, ParamStore};
