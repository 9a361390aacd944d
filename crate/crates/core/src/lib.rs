//! Correction-focused language model training at desk scale.
//!
//! The pipeline: a noisy-channel ASR stand-in corrupts reference text
//! ([`asrsim`]); hypotheses are aligned and annotated with per-word error
//! labels ([`align`]); a small token classifier learns to predict word
//! fallibility ([`predictor`]); a dual-head generator synthesizes in-domain
//! text with scores ([`generator`]); an autoregressive LM is trained with a
//! fallibility-weighted loss ([`nnlm`]); and n-best rescoring measures the
//! end-to-end WER effect ([`fusion`]). All differentiable pieces run on the
//! small reverse-mode kernel in [`numkit`].

pub mod align;
pub mod asrsim;
pub mod corpus;
pub mod error;
pub mod fusion;
pub mod generator;
pub mod nnlm;
pub mod numkit;
pub mod predictor;
pub(crate) mod rnn;
pub(crate) mod train;

pub use error::{Error, Result};
pub use train::substream_seed;
