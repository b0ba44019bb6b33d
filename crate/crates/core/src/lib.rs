//! Gradient saliency maps with rule-based ReLU backpropagation.
//!
//! The crate bundles a small CNN engine ([`tensor`], [`kernels`],
//! [`network`], [`trainer`]), the attribution methods themselves
//! ([`attribution`], [`concept`]) and the input-bias studies
//! ([`experiments`]). Heavy loops go through [`par`], which uses rayon when
//! the `parallel` feature is enabled.

pub mod attribution;
pub mod concept;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod kernels;
pub mod network;
pub mod par;
pub mod render;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
