//! Seeded synthetic data: interaction logs with planted preferences and
//! low-rank embedding sets.

use ndarray::Array2;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::data::{CatalogEntry, Interaction};
use crate::error::{Error, Result};
use crate::rng::{seeded, standard_normal, streams};

/// Interaction generator settings.
///
/// Each item belongs to one category and sits on a ring of its category's
/// items. A user prefers one category; each next event is the ring successor
/// of the previous item, a popularity-weighted draw from the preferred
/// category, or a popularity-weighted draw from the whole catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    pub brands_per_category: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub p_successor: f64,
    pub p_category: f64,
    /// Exponent of the within-category popularity decay.
    pub zipf: f64,
    pub time_span: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 240,
            items: 150,
            categories: 5,
            brands_per_category: 2,
            min_len: 14,
            max_len: 30,
            p_successor: 0.6,
            p_category: 0.3,
            zipf: 0.6,
            time_span: 100_000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.categories == 0 || self.brands_per_category == 0 {
            return Err(Error::Config("synthetic generator needs users, categories and brands".into()));
        }
        if self.items < 2 * self.categories {
            return Err(Error::Config("need at least two items per category".into()));
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return Err(Error::Config("sequence lengths must satisfy 2 <= min <= max".into()));
        }
        if self.p_successor < 0.0 || self.p_category < 0.0 || self.p_successor + self.p_category > 1.0 {
            return Err(Error::Config("transition probabilities must be non-negative and sum to <= 1".into()));
        }
        Ok(())
    }

    pub fn category_of(&self, item: usize) -> usize {
        item % self.categories
    }

    /// Next item on the category ring.
    pub fn successor(&self, item: usize) -> usize {
        let next = item + self.categories;
        if next < self.items {
            next
        } else {
            self.category_of(item)
        }
    }
}

/// Users `u0…`, items `i0…` with a catalog of `cat*`/`brand*` labels.
pub fn interactions(cfg: &SynthConfig, seed: u64) -> Result<(Vec<Interaction>, Vec<CatalogEntry>)> {
    cfg.validate()?;
    let mut rng = seeded(seed, streams::SYNTH);
    let weight = |j: usize| 1.0 / ((j / cfg.categories + 1) as f64).powf(cfg.zipf);
    let catalog: Vec<CatalogEntry> = (0..cfg.items)
        .map(|j| {
            let c = cfg.category_of(j);
            let b = c * cfg.brands_per_category + (j / cfg.categories) % cfg.brands_per_category;
            CatalogEntry { item_id: format!("i{j}"), title: format!("item {j}"), brand: format!("brand{b}"), category: format!("cat{c}") }
        })
        .collect();
    let global = WeightedIndex::new((0..cfg.items).map(weight)).expect("positive weights");
    let per_cat: Vec<(Vec<usize>, WeightedIndex<f64>)> = (0..cfg.categories)
        .map(|c| {
            let members: Vec<usize> = (0..cfg.items).filter(|&j| cfg.category_of(j) == c).collect();
            let w = WeightedIndex::new(members.iter().map(|&j| weight(j))).expect("positive weights");
            (members, w)
        })
        .collect();

    let mut out = Vec::new();
    for u in 0..cfg.users {
        let pref = rng.random_range(0..cfg.categories);
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut times: Vec<i64> = (0..len).map(|_| rng.random_range(0..cfg.time_span)).collect();
        times.sort_unstable();
        let (members, w) = &per_cat[pref];
        let mut item = members[w.sample(&mut rng)];
        for (step, &ts) in times.iter().enumerate() {
            if step > 0 {
                let r: f64 = rng.random();
                item = if r < cfg.p_successor {
                    cfg.successor(item)
                } else if r < cfg.p_successor + cfg.p_category {
                    members[w.sample(&mut rng)]
                } else {
                    global.sample(&mut rng)
                };
            }
            out.push(Interaction { user_id: format!("u{u}"), item_id: format!("i{item}"), timestamp: ts });
        }
    }
    Ok((out, catalog))
}

/// `n × dim` vectors of exact rank `rank` plus isotropic noise of scale `noise`.
pub fn low_rank_embeddings(n: usize, dim: usize, rank: usize, noise: f64, seed: u64) -> Result<Array2<f64>> {
    if rank == 0 || rank > dim {
        return Err(Error::InvalidArgument(format!("rank {rank} must lie in 1..={dim}")));
    }
    let mut rng = seeded(seed, streams::SYNTH);
    let z = standard_normal(&mut rng, n, rank);
    let basis = standard_normal(&mut rng, rank, dim) / (rank as f64).sqrt();
    let eps = standard_normal(&mut rng, n, dim) * noise;
    Ok(z.dot(&basis) + eps)
}
