//! Multi-class anomaly detection by reconstructing patch-feature maps from a
//! learnable reference bank.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode tape
//! - [`features`]: feature files, neighbourhood aggregation, perturbation,
//!   synthetic datasets
//! - [`model`]: attention masks, reference bank and the reconstruction network
//! - [`train`]: loss, Adam, the training loop and checkpoints
//! - [`eval`]: score maps, AUROC, evaluation and the ablation harness
//! - [`config`]: the resolved run configuration shared by the CLI

pub mod tensor;
pub mod config;
pub mod eval;
pub mod features;
pub mod model;
pub mod rng;
pub mod train;
