//! Semantic image transmission over Fisher-Snedecor F fading links.
//!
//! Detected objects are cut out of an image, each crop gets a share of the
//! transmit power budget, and the received crops are scored with MIST, a
//! confidence-weighted sum of SSIMs. The crate provides the channel and
//! quality models, uniform and confidence-weighted allocators, a diffusion
//! policy trained against a reward surrogate, and reference SimAM and gⁿConv
//! kernels.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod channel;
pub mod detection;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod kernels;
pub mod neural;
pub mod plot;
pub mod quad;
pub mod quality;
pub mod scene;
pub mod surrogate;

pub use error::{Error, Result};

/// Mix a seed with an index into an independent stream seed (SplitMix64
/// finalizer over `seed ^ (index + 1)·φ`).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
