//! Continual prompt tuning for multimodal transformers whose inputs lose
//! modalities over time.
//!
//! A frozen per-modality transformer backbone is adapted to a stream of
//! tasks, each defined by which of audio, video and text are missing. Three
//! prompt families are prepended to attention layers: modality-specific
//! prompts shared by all tasks, task-aware prompts generated from them and
//! two missing-modality keys, and one task-specific prompt per task. A
//! contrastive loss over the task-aware prompts ties related tasks together.
//!
//! Everything runs on a small reverse-mode autodiff engine in [`tensor`].

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod continual;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod prompts;
pub mod tensor;

pub use error::{Error, Result};
