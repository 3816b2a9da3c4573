//! Dual positive/negative prompt optimization for multi-label recognition.
//!
//! A pair of learnable context sequences per class (or one shared pair) is
//! prepended to the class-name token and encoded by a frozen text encoder.
//! Region features of an image are compared against both encodings, pooled
//! per class with weights derived from the positive logits, and the two
//! pooled logits form a binary classifier trained with the asymmetric loss.
//!
//! Module map:
//!
//! * [`data`]: catalogs, label matrices, synthetic data, masking, splits, file formats
//! * [`prompts`]: prompt banks and checkpoints
//! * [`encoders`]: frozen toy encoders and the backend trait
//! * [`scoring`]: region logits, aggregation, probabilities, attention maps
//! * [`loss_opt`]: asymmetric loss, exact gradients, SGD training
//! * [`metrics`]: mAP, CP/CR/CF1, OP/OR/OF1, top-k, evaluation driver

pub mod data;
pub mod encoders;
pub mod error;
pub mod exec;
pub mod loss_opt;
pub mod metrics;
pub mod model;
pub mod prompts;
pub mod rng;
pub mod scoring;

pub use error::{Error, Result, Stage};
pub use exec::ExecMode;

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex SHA-256 of a value's canonical JSON serialization.
pub fn config_digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize");
    hex::encode(Sha256::digest(&bytes))
}
