//! Core library for a channel-agnostic EEG foundation model: data
//! preparation, 4-D positional encoding, masked-autoencoder pretraining and
//! downstream adaptation.

pub mod autodiff;
pub mod config;
pub mod datapipe;
pub mod eeg_data;
pub mod finetune;
pub mod flops;
pub mod error;
pub mod masking;
pub mod model;
pub mod montage;
pub mod optim;
pub mod patching;
pub mod posenc;
pub mod pretrain;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};
