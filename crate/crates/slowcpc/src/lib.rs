//! Self-supervised speech representation learning from raw waveforms.
//!
//! The crate trains a contrastive predictive coder (strided convolutional
//! encoder, recurrent context network, per-step future prediction heads)
//! with optional slowness regularizers on the encoder features, and ships
//! the evaluation battery used to judge the learned representations:
//! ABX phone discrimination, linear phone/speaker probes, and k-means
//! clustering scored by purity and normalized mutual information.
//!
//! Modules:
//! - [`audio`]: WAV ingestion, manifests, forced alignments, window sampling
//! - [`augment`]: time-domain augmentation of the future signal
//! - [`model`]: encoder / context network / prediction heads / checkpoints
//! - [`losses`]: InfoNCE, self-expressing and left-or-right regularizers
//! - [`trainer`]: Adam loop, metrics log, deterministic fit
//! - [`eval`]: feature extraction, ABX, probes, clustering
//! - [`synth`]: synthetic corpus generator for desk-scale experiments

pub mod audio;
pub mod augment;
pub mod eval;
pub mod losses;
pub mod model;
pub mod rng;
pub mod synth;
pub mod trainer;
