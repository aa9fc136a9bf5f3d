//! Embedding stack, encoder variants (baseline, factored and shared,
//! bottleneck, reversible with LSH attention) and parameter accounting.

mod config;
pub mod container;
mod count;
mod forward;
pub mod reversible;
mod weights;

pub use config::{ModelConfig, LAYER_NORM_EPS};
pub use count::count_parameters;
pub use forward::{embed, encoder_forward, encoder_layer, feed_forward, layer_at, self_attention};
pub use weights::{
    map_multi_head, Bottleneck, Embeddings, Encoder, EncoderLayer, FeedForward, Init, LayerNorm, ParamSpec, Params,
};
