//! End-to-end masked pre-training for pronunciation assessment at desk scale.
//!
//! An audio-conditioned masked language model scores how well each token of a
//! reference transcript matches the audio: the encoder ingests 80-channel
//! log-mel features through a convolutional subsampler, and a bidirectional
//! transformer decoder predicts masked transcript tokens through
//! cross-attention. Per-token log-likelihoods from single-mask passes serve
//! as unsupervised pronunciation scores; a small regression head fine-tuned
//! on rated data provides supervised scores.
//!
//! Modules:
//! - [`dsp`]: waveform I/O, resampling, log-mel features
//! - [`text`]: vocabularies, token sequences, lexicon phonemization
//! - [`nn`]: tensors, reverse-mode autodiff, Adam
//! - [`model`]: the encoder-decoder architecture
//! - [`train`]: masked pre-training and fine-tuning loops
//! - [`score`]: mask-predict scoring, decoding and attention export
//! - [`metrics`]: MSE, PCC, accuracy and WER

pub mod dsp;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod score;
pub mod text;
pub mod train;

pub use error::{Error, Result};
