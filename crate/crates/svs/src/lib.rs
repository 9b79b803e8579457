//! Desk-scale singing voice synthesis training toolkit.
//!
//! Implements a two-stage pipeline: melody-unsupervised multi-singer
//! pre-training (CTC phoneme predictor, frame-level speaker embedding,
//! estimated-f0 pitch conditioning) followed by single-singer fine-tuning
//! (score-driven prior with a differentiable duration regulator and
//! frame-level pitch/energy predictors), joined by a bi-directional
//! normalizing flow over a VAE latent and a small GAN vocoder.
//!
//! Entry points:
//! - [`dsp`] audio features and pitch quantization
//! - [`score`] symbolic corpus model and batching
//! - [`posterior`] spectrogram encoder and CTC phoneme predictor
//! - [`prior`] score/speaker conditioning and duration regulation
//! - [`flow`] invertible latent transform with bidirectional KL
//! - [`vocoder`] waveform decoder and discriminators
//! - [`trainer`] two-stage optimization, checkpoints, synthesis
//! - [`eval`] objective metric suite
//!
//! The `examples/` directory holds one runnable example per capability; the
//! `svs` binary exposes the training/synthesis/evaluation subcommands.

pub mod config;
pub mod dsp;
pub mod error;
pub mod nn;
pub mod score;

pub use config::Config;
pub use error::{Result, SvsError};
