//! Auto-regressive diffusion sequential recommender.
//!
//! A causal transformer encodes the clean interaction history; a second
//! causal transformer denoises the shifted target sequence, where every
//! token carries its own diffusion timestep. Training runs in three stages
//! (embedding pre-training, frozen-embedding warm-up, full fine-tuning) and
//! inference only noises the final position.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod par;
pub mod train;

pub use error::{Error, Result};

/// Deterministic generator used for every stochastic step.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Mix `parts` into `seed` (splitmix64 finaliser per part).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(seed, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}
