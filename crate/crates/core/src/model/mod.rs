//! The mask predictor: configuration, parameters, forward/backward passes,
//! losses, optimizer and checkpoints.

pub mod config;
pub mod forward;
pub(crate) mod linalg;
pub mod params;

pub use config::{AttentionMode, ModelConfig, Precision};
pub use forward::{attention_limits, backward, forward, forward_train, ForwardCache, LogitsGrid};
pub use linalg::{log_softmax, softmax};
pub use params::{DenoiserParams, Gradients, ParamEntry, ParamLayout};
pub mod gradcheck;
pub mod loss;
pub mod optim;

pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{block_nelbo_term, nelbo_term, PassEval, ScoringPass, Target};
pub use optim::{apply_update, AdamHyper, OptimizerState};
pub mod checkpoint;

pub use checkpoint::{Checkpoint, RecordData};
