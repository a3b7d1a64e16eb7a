//! Bias-free pre-norm transformer (RMSNorm, GEGLU, multi-head attention),
//! its size presets, parameter registry and checkpoint format.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod params;

pub use checkpoint::{Checkpoint, Manifest, TensorEntry};
pub use config::{Activation, ModelConfig, NormKind};
pub use layers::{encoder_forward, Binder};
pub use params::{init_encoder, init_pretrain, is_encoder_param, ParamKind, ParamSet, INIT_STD};
