//! Multitask finetuning toolkit for small sequence-to-sequence transformers:
//! translation training with an optional causal language modeling auxiliary
//! objective over source- and target-side monolingual text.

pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod model;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};

/// Hex SHA-256 of `text`.
pub fn fingerprint(text: &str) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}
