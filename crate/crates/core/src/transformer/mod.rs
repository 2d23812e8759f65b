//! The sentence-level encoder-decoder that every context variant builds on.

mod base;
mod config;
mod layers;
mod loss;

pub use base::{BaseLayout, DecoderLayer, EncoderLayer};
pub use config::ModelConfig;
pub use layers::{
    causal_mask, scaled_dot_attention, sinusoid_table, FeedForward, LayerNorm, Linear,
    MultiHeadAttention,
};
pub(crate) use layers::Init;
pub use loss::{cross_entropy, mean_cross_entropy, CrossEntropy, PROB_FLOOR};
