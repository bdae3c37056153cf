//! Classification under arbitrary modality missingness.
//!
//! The pipeline encodes every observed modality into a shared space, aligns
//! each modality (including missing ones) through prototype-anchored masked
//! cross-attention, and fuses per-modality Gaussian experts in closed form
//! before a Monte Carlo classifier. Around the model sit a synthetic cohort
//! generator, a trainer, an evaluation harness that scores every non-empty
//! modality subset, and the `missfuse` command-line tool.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod params;
pub mod pra;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod uapoe;
pub mod verify;

pub use encoders::{FeatureBundle, ModalityMask, Sample};
pub use error::{Error, Result};
pub use model::{Inference, ModelConfig, ModelParams};
pub use tensor::Tensor;
