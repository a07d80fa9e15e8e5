//! Likelihood-based generative models trained with annealed data
//! mollification.
//!
//! The crate bundles a small reverse-mode autodiff engine, coupling and
//! masked autoregressive flows, a Gaussian VAE, noise schedules, Gaussian
//! and DCT-blur mollification, toy and tabular datasets, evaluation
//! metrics and a training loop that ties them together.

pub mod autodiff;
pub mod checkpoint;
pub mod datasets;
pub mod evalmetrics;
pub mod experiment;
pub mod flows;
pub mod model;
pub mod mollify;
pub mod nn;
pub mod rng;
pub mod schedules;
pub mod trainer;
pub mod vae;
