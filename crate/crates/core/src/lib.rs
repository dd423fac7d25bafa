//! Self-supervised representation learning for multivariate time series with
//! disentangled timestamp-level and instance-level embeddings.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: a dense-tensor reverse-mode autodiff engine (Wengert tape)
//!   with a finite-difference oracle for verification.
//! - [`data`]: CSV ingestion, chronological/stratified splits, sliding
//!   windows, instance normalization, patching, channel independence, and
//!   the six time-series augmentations.
//! - [`encoder`]: Transformer encoder producing a dual embedding per window:
//!   one vector per patch token plus a single instance vector read from a
//!   learnable instance token prepended to the patch sequence.
//! - [`pretext`]: the two self-supervised objectives — patch reconstruction
//!   on the timestamp embeddings and a negative-free contrastive task on the
//!   instance embeddings (two dropout views, prediction head, stop-gradient).
//! - [`trainer`]: AdamW with decoupled weight decay, the joint pretraining
//!   loop, early stopping, and checkpointing.
//! - [`evaluation`]: frozen-encoder linear probes, semi-supervised
//!   fine-tuning, and the MSE/MAE/ACC/MF1/kappa metrics.
//!
//! All floating-point work is generic over [`scalar::Scalar`] so the same
//! code runs in f32 (training speed) or f64 (gradient checks).

pub mod data;
pub mod encoder;
pub mod evaluation;
pub mod pretext;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, TensorError};
