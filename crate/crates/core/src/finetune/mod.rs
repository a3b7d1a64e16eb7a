//! Downstream adaptation and evaluation: linear probes, two-step
//! fine-tuning with low-rank adapters, mixup, model soups, few-shot
//! nearest-class-mean, Euclidean Alignment and metrics.

pub mod alignment;
pub mod lora;
pub mod metrics;
pub mod mixup;
pub mod ncm;
pub mod probe;
pub mod soup;
pub mod subset;
pub mod two_step;

pub use alignment::{align_recordings, euclidean_alignment};
pub use lora::{lora_inject, lora_merge, LoraConfig, LoraTarget};
pub use metrics::{evaluate, summarize, MetricReport, SeedSummary};
pub use mixup::mixup_batch;
pub use ncm::{ncm_few_shot, NcmSummary};
pub use probe::{evaluate_samples, linear_probe, probe_encoder, Pooling, ProbeConfig, ProbeModel, SampleClassifier};
pub use soup::{soup, soup_params};
pub use subset::channel_subset_eval;
pub use two_step::{two_step_finetune, FinetunePlan, FinetunedModel, ReduceOnPlateau};
