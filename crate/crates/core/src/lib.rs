//! Human activity recognition with self-supervised embeddings,
//! density-driven active learning and per-user fine-tuning.
//!
//! A user's device accumulates unlabeled accelerometer windows, embeds them
//! with a pre-trained encoder, reduces the embeddings with PCA and clusters
//! them with DBSCAN. Each later window is matched to its nearest cluster and
//! the user is asked for a label only when the window would make that cluster
//! denser. The answered windows fine-tune a classification head.

pub mod cli;
pub mod clusterstore;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod reduction;
pub mod seed;
pub mod session;

pub use error::{Error, Result};
