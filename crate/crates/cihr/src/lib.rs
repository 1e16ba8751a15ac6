//! CIHR: humor recognition conditioned on speaker profiles.
//!
//! Library layout:
//! - [`numerics`]: f64 tensors, reverse-mode tape, finite-difference oracle
//! - [`tokenizer`]: vocabulary, sequence encoding, embedding tables
//! - [`profile`]: static-profile feature normalization and fusion
//! - [`commonality`]: perspective prompts, analysis backends, replay cache
//! - [`model`]: profile-guided encoder stack, dynamic fusion, classifier
//! - [`data`]: dataset schemas, synthetic generator, splits, batching
//! - [`train`]: Adam, metrics, training loop, ablation variants
//! - [`checkpoint`]: binary parameter snapshots

pub mod checkpoint;
pub mod commonality;
pub mod config;
pub mod data;
pub mod model;
pub mod numerics;
pub mod profile;
pub mod tokenizer;
pub mod train;
