//! Generative single-channel source separation.
//!
//! Sources are modelled in a cosine-modulated subband domain by
//! autoregressive networks conditioned on an additive-noise level. A mixture
//! is separated by annealed Langevin sampling that follows each model's score
//! while a Gaussian mix likelihood keeps the estimates consistent with the
//! observation.

pub mod audio;
pub mod dataset;
pub mod diffgraph;
pub mod evalkit;
pub mod rng;
pub mod sampler;
pub mod srcmodel;
pub mod subband;
pub mod synth;
pub mod trainer;
