//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Unknown keys are errors. Values are
//! parsed with each field's `FromStr`; `--set key=value` overrides go through
//! the same path.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::retrieval::MatchRule;
use crate::synth::SynthConfig;

/// Recommendation head placed after the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    Diffusion,
    /// Direct MSE projection from the condition to the target embedding.
    Projection,
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(Self::Diffusion),
            "projection" => Ok(Self::Projection),
            other => Err(Error::Config(format!("unknown head '{other}'"))),
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Diffusion => "diffusion",
            Self::Projection => "projection",
        })
    }
}

/// Values the loss weights may take.
pub const LOSS_WEIGHT_GRID: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];

macro_rules! run_config {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct RunConfig {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field), )*];

            /// Assign one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = value.parse::<$ty>().map_err(|e| {
                            Error::Config(format!("bad value '{value}' for {key}: {e}"))
                        })?;
                    } )*
                    other => return Err(Error::Config(format!("unknown config key '{other}'"))),
                }
                Ok(())
            }

            /// All keys with their current values, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($field), self.$field.to_string()), )*]
            }
        }
    };
}

run_config! {
    /// Label written into metric records.
    dataset: String = "synthetic".into(),
    /// Interaction TSV; empty selects the synthetic generator.
    interactions: String = String::new(),
    catalog: String = String::new(),
    external_embeddings: String = String::new(),
    external_mode: crate::data::ExternalMode = crate::data::ExternalMode::Concat,
    output_dir: String = "runs/default".into(),
    seed: u64 = 0,

    train_quantile: f64 = 0.9,
    valid_quantile: f64 = 0.95,
    max_history: usize = 20,

    synth_users: usize = SynthConfig::default().users,
    synth_items: usize = SynthConfig::default().items,
    synth_categories: usize = SynthConfig::default().categories,
    synth_brands_per_category: usize = SynthConfig::default().brands_per_category,
    synth_min_len: usize = SynthConfig::default().min_len,
    synth_max_len: usize = SynthConfig::default().max_len,
    synth_p_successor: f64 = SynthConfig::default().p_successor,
    synth_p_category: f64 = SynthConfig::default().p_category,
    synth_seed: u64 = 0,

    /// Base embedding width `D` (also the diffusion target width).
    embed_dim: usize = 16,
    /// Tokens per entity `K`.
    num_tokens: usize = 2,
    /// Token width `D_z`.
    token_dim: usize = 8,
    tokenizer_hidden: usize = 64,
    mask_ratio: f64 = 0.2,
    vae_beta: f64 = 0.25,
    gamma_floor: f64 = 1e-3,
    tokenizer_lr: f64 = 1e-4,
    tokenizer_weight_decay: f64 = 1e-3,
    tokenizer_epochs: usize = 200,
    tokenizer_batch: usize = 64,

    backbone_width: usize = 32,
    backbone_layers: usize = 2,
    backbone_heads: usize = 2,
    /// Condition width `D_c`.
    cond_dim: usize = 32,
    backbone_lr: f64 = 1e-5,
    backbone_weight_decay: f64 = 1e-4,

    head: HeadKind = HeadKind::Diffusion,
    diffusion_hidden: usize = 64,
    diffusion_heads: usize = 2,
    diffusion_steps: usize = 1000,
    inference_steps: usize = 100,
    beta_start: f64 = 1e-4,
    beta_end: f64 = 0.02,
    uncond_prob: f64 = 0.1,
    temperature: f64 = 0.5,
    diffusion_repeats: usize = 4,
    omega: f64 = 2.0,
    gamma1: f64 = 1.0,
    gamma2: f64 = 0.5,
    pi: f64 = 0.05,
    match_rule: MatchRule = MatchRule::Category,
    activation: Activation = Activation::Silu,

    batch_size: usize = 24,
    epochs: usize = 20,
    /// Validate every this many epochs; 0 disables model selection.
    eval_every: usize = 5,
    /// Inference repetitions for the reported mean and std.
    eval_seeds: usize = 5,
    /// Stop the recommender phase after this many steps; 0 means no limit.
    max_steps: usize = 0,

    bench_items: usize = 2048,
    bench_dim: usize = 64,
    bench_rank: usize = 8,
    bench_noise: f64 = 0.01,
    bench_steps: usize = 1500,
    bench_batch: usize = 128,
    bench_hidden: usize = 64,
    bench_lr: f64 = 1e-3,
    bench_eval_every: usize = 100,
    bench_codebook: usize = 256,
    bench_depth: usize = 3,
    bench_tokens: usize = 4,
    bench_token_dim: usize = 4,
}

impl RunConfig {
    /// Parse a config file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse { path: origin.into(), line: n + 1, message: "expected key = value".into() });
            };
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse { path: origin.into(), line: n + 1, message: e.to_string() })?;
        }
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma1", self.gamma1), ("gamma2", self.gamma2)] {
            if !LOSS_WEIGHT_GRID.contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside the grid {LOSS_WEIGHT_GRID:?}")));
            }
        }
        if !(0.0 < self.train_quantile && self.train_quantile < self.valid_quantile && self.valid_quantile < 1.0) {
            return Err(Error::Config("quantiles must satisfy 0 < train < valid < 1".into()));
        }
        if self.omega < 0.0 {
            return Err(Error::Config("omega must be >= 0".into()));
        }
        if self.pi < 0.0 {
            return Err(Error::Config("pi must be >= 0".into()));
        }
        if self.epochs > 200 {
            return Err(Error::Config("epochs are capped at 200".into()));
        }
        if self.batch_size == 0 || self.tokenizer_batch == 0 || self.bench_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.eval_seeds == 0 {
            return Err(Error::Config("eval_seeds must be >= 1".into()));
        }
        if self.interactions.is_empty() != self.catalog.is_empty() {
            return Err(Error::Config("interactions and catalog must be given together".into()));
        }
        Ok(())
    }

    /// Canonical `key = value` text, one per line.
    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn output_path(&self, name: &str) -> PathBuf {
        Path::new(&self.output_dir).join(name)
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            users: self.synth_users,
            items: self.synth_items,
            categories: self.synth_categories,
            brands_per_category: self.synth_brands_per_category,
            min_len: self.synth_min_len,
            max_len: self.synth_max_len,
            p_successor: self.synth_p_successor,
            p_category: self.synth_p_category,
            ..SynthConfig::default()
        }
    }

    pub fn uses_synthetic_data(&self) -> bool {
        self.interactions.is_empty()
    }
}

impl fmt::Display for crate::data::ExternalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Replace => "replace",
            Self::Concat => "concat",
        })
    }
}
