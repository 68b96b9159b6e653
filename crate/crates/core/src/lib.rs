//! Barlow Twins further pre-training toolkit.
//!
//! The crate covers the whole workflow: two-branch augmentation, the
//! (sparse) Barlow Twins objective, 1cycle scheduling with a learning-rate
//! finder, encoder/projector/head construction with a named-tensor archive
//! format, the further-pretraining / fine-tuning / linear-probe protocols,
//! manifest-driven datasets, and multi-run statistical evaluation.

pub mod augment;
pub mod datasets;
pub mod eval_stats;
pub mod exec;
pub mod model_zoo;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod protocols;
pub mod rng;
pub mod schedule;
pub mod ssl_core;
