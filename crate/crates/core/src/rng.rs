//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream derived from a
//! run seed and a stream id, so runs are reproducible and independent
//! consumers (per-user sampling, masking, init) never share a stream.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

pub fn seeded(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Well-known stream ids.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TOKENIZER_TRAIN: u64 = 2;
    pub const RECOMMENDER_TRAIN: u64 = 3;
    pub const DUMMY_CONDITION: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const BENCH: u64 = 6;
    /// Per-entity inference streams start here and are offset by entity index.
    pub const INFERENCE_BASE: u64 = 1 << 32;
}

pub fn standard_normal(rng: &mut StreamRng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}
