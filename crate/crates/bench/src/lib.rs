//! Fixtures shared by the benchmarks.

use std::collections::BTreeSet;

use diffrec_core::diffusion::{DiffusionConfig, DiffusionHead};
use diffrec_core::nn::{EncoderLayer, Params};
use diffrec_core::rng::{seeded, standard_normal, StreamRng};
use ndarray::Array2;
use rand::Rng;

pub fn encoder(width: usize, heads: usize) -> (Params, EncoderLayer) {
    let mut params = Params::new();
    let layer = EncoderLayer::new(&mut params, &mut seeded(0, 0), "enc", width, heads, 2 * width);
    (params, layer)
}

pub fn diffusion_head(item_dim: usize, cond_dim: usize) -> DiffusionHead {
    let mut cfg = DiffusionConfig::new(item_dim, cond_dim);
    cfg.inference_steps = 20;
    DiffusionHead::new(cfg, 0).expect("valid config")
}

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    standard_normal(&mut seeded(seed, 0), rows, cols)
}

pub fn user_streams(n: usize) -> Vec<StreamRng> {
    (0..n as u64).map(|u| seeded(0, u)).collect()
}

pub fn random_scores(m: usize, seed: u64) -> (Vec<f64>, BTreeSet<usize>) {
    let mut rng = seeded(seed, 0);
    let scores = (0..m).map(|_| rng.random::<f64>()).collect();
    let exclude = (0..20).map(|_| rng.random_range(0..m)).collect();
    (scores, exclude)
}
