//! Cross-lingual audio-visual self-supervised learning at desk scale.
//!
//! The crate covers the whole pipeline:
//!
//! * [`corpus`]: manifests, language-hour accounting and the sampling
//!   protocols that build monolingual, multilingual, capped, matched-hours,
//!   low-resource, paired and leave-one-out pre-training sets;
//! * [`datapipe`]: mouth-region preprocessing, augmentation and span masking;
//! * [`model`]: video/audio encoders, predictors and the recognition decoder;
//! * [`optim`]: AdamW with gradient accumulation and clipping;
//! * [`pretrain`]: masked student / momentum teacher pre-training;
//! * [`finetune`]: tokenizers and joint CTC/attention fine-tuning;
//! * [`decode`]: joint CTC/attention beam search and CER evaluation;
//! * [`experiment`]: presets that chain the stages into comparable runs.

pub mod corpus;
pub mod datapipe;
pub mod decode;
pub mod error;
pub mod experiment;
pub mod finetune;
pub mod media;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod seed;

pub use error::{Error, Result};
