//! Hierarchically aligned cross-modal attention captioning engine.
//!
//! A self-contained sequence-to-sequence stack: reverse-mode autodiff
//! tensors, LSTM cells, soft and cross-modal attention, hierarchical
//! attentive encoders per modality, aligned global/local decoders, Adadelta
//! training with scheduled sampling, greedy/beam inference, BLEU-4 scoring,
//! and a synthetic multimodal dataset generator for desk-scale experiments.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
