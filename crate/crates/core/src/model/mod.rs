//! Transformer model: configuration, parameters, positional schemes, the
//! batched training forward pass, incremental decoding with KV caches, and
//! checkpoint serialization.

pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod forward;
pub mod params;
pub mod positional;

pub use config::{
    CacheKind, FfnKind, ModelConfig, NormKind, NormPlace, PosKind, RopeScaling,
};
pub use decode::{decode_step, DecodeState, LayerCache, StepOut};
pub use forward::{forward_embeddings, forward_tokens, ForwardOpts, ForwardOut};
pub use params::{ModelParams, ParamVars, INIT_STD};
pub use positional::{
    alibi_bias, alibi_slope, rope_apply, rope_interpolate, t5_bias, t5_bucket,
    InterpolationMode, RotaryParams, ROPE_DEFAULT_BASE,
};
