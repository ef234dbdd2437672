//! Seeded, named RNG streams.
//!
//! Every random draw in the crate comes from a ChaCha12 generator keyed by
//! (global seed, stream id). Stream ids keep independent concerns (noise
//! draws per class, batch composition, classifier pairs, ...) on separate
//! streams so that aligning one does not perturb another.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

/// Stream ids. Per-class streams add the class id to a base.
pub mod streams {
    pub const MODEL_INIT: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const DATASET: u64 = 3;
    pub const EPISODE: u64 = 4;
    pub const COMPOSITION: u64 = 5;
    pub const CLASSIFIER: u64 = 6;
    pub const NULL_PROMPTS: u64 = 7;
    /// (t, eps) draws for prompt training, plus `class_id`.
    pub const PROMPT_NOISE_BASE: u64 = 0x1_0000;
    /// Prompt initialization noise, plus `class_id`.
    pub const PROMPT_INIT_BASE: u64 = 0x2_0000;
    /// Pretraining class conditions, plus `class_id`.
    pub const CLASS_CONDITION_BASE: u64 = 0x3_0000;
    /// Independent-pair classifier streams, plus the candidate index.
    pub const CLASSIFIER_INDEP_BASE: u64 = 0x4_0000;
    /// Per-query classifier streams, plus the query index.
    pub const QUERY_BASE: u64 = 0x10_0000;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from (seed, tag); used to give fan-out workers
/// (one per benchmark query, for example) their own stream families.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut state = seed ^ tag.rotate_left(17).wrapping_mul(0xA24B_AED4_963E_E407);
    splitmix64(&mut state)
}

/// Deterministic generator for the given (seed, stream) pair.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut state = seed ^ stream.rotate_left(32).wrapping_mul(0xD129_0D3E_AC65_46CB) ^ 0x5851_F42D_4C95_7F2D;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}
