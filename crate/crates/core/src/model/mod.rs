//! Minimal RMSNorm + RoPE + SwiGLU decoder with tied embeddings and a
//! working-precision KV cache. Linear layers run either in `f32` or as
//! emulated NVFP4 W4A4 GEMMs; everything else always runs in `f32`.

mod config;
mod forward;
mod kv;
mod weights;

pub use config::{ModelConfig, CONFIG_BLOCK_LEN};
pub use forward::{
    apply_rope, rms_norm, softmax_in_place, AttentionRecord, Fp4Kernel, Model, Precision,
    PrefillOutput, RMS_NORM_EPS,
};
pub use kv::KvCache;
pub use weights::{init_model, LayerWeights, ModelWeights, INIT_STD};
