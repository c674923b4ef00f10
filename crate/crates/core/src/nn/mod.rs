//! Parameter storage, layers and optimization shared by all model parts.

pub mod init;
pub mod layers;
pub mod optim;
pub mod params;

pub use layers::{
    grid_to_tokens, tokens_to_grid, Block, Conv2d, LayerNorm, Linear, Mlp, MultiHeadAttention,
};
pub use optim::AdamW;
pub use params::{Fwd, Init, ParamGrads, ParamId, ParamStore};
