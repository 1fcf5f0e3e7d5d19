//! Windowed self-attention regressors: one prediction per sliding window
//! (seq2one) or a full-length output from stacked fused-window blocks
//! (seq2seq).

mod config;
mod net;
mod params;

pub use config::{
    slide_windows, AttentionConfig, ModelConfig, Seq2OneConfig, Seq2SeqConfig, WindowSpec,
};
pub use net::{
    encoder_layer, forward, predict, seq2one_forward, seq2seq_block, seq2seq_forward,
    sinusoidal_encoding, EncoderOut, EncoderSpec,
};
pub use params::{count_params, ModelParams, ParamVars};
