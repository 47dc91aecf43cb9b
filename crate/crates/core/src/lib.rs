//! Few-shot speaker adaptation for a toy multi-speaker FastSpeech 2.
//!
//! - [`corpus`]: synthetic speakers with known latents, the analytic embedder, corpus files
//! - [`model`]: the acoustic model, its partitioned parameters and checkpoints
//! - [`episodes`]: K-shot support/query task sampling and manifests
//! - [`metalearn`]: module-selective MAML (second- or first-order)
//! - [`baselines`]: multi-task training and speaker-encoder TTS
//! - [`cloning`]: unseen-speaker preparation, fine-tuning trajectories, synthesis
//! - [`metrics`]: similarity, EER/DET, ROC/AUC and report aggregation

pub mod baselines;
pub mod cloning;
pub mod corpus;
pub mod episodes;
pub mod error;
pub mod io;
pub mod metalearn;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
