//! Audio-visual speech recognition with cross-modal global interaction and
//! local alignment, at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, a reverse-mode tape, attention and normalization
//!   layers, Adam, and a finite-difference gradient checker.
//! - [`frontend`]: audio frame stacking, modality embeddings and the initial
//!   bottleneck feature.
//! - [`gi`]: the global-interaction stack (self-attention, cross-attention,
//!   feed-forward, iterative refinement of the bottleneck).
//! - [`align`]: within-layer and cross-layer contrastive alignment with
//!   Gumbel vector quantization.
//! - [`recognizer`]: multimodal fusion, Transformer encoder-decoder, decoding
//!   and word error rate.
//! - [`data`]: the synthetic audio-visual corpus and noise augmentation.
//! - [`harness`]: configuration, loss assembly, training, evaluation,
//!   checkpoints and diagnostics.

pub mod align;
pub mod data;
pub mod error;
pub mod frontend;
pub mod gi;
pub mod harness;
pub mod numerics;
pub mod recognizer;

pub use error::{GilaError, Result};
pub use numerics::{Mode, ParamStore, Real, RngStream, Tape, Tensor, Var};
