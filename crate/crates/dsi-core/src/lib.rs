//! Unsupervised dialogue state induction.
//!
//! The pipeline ingests raw task-oriented dialogues, extracts candidate
//! values from each user turn and its preceding system utterance, embeds
//! the candidates with a pluggable provider, trains a latent-variable
//! model (a VAE with a global Gaussian prior, or a Mixture-of-Gaussians
//! variant that additionally assigns each turn a latent domain), and
//! scores the induced slot-value states against gold annotations.
//!
//! Stages communicate only through versioned file formats, so every
//! stage can be run, inspected and tested in isolation.

pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod extract;
pub mod features;
pub mod manifest;
pub mod model;
pub mod state;
pub mod synth;
pub mod text;
pub mod train;

pub use error::{Error, Result};
