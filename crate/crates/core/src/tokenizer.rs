//! σ-VAE tokenizer: maps a base embedding to `K` continuous tokens.
//!
//! Each of the `K` sub-encoders sees a Bernoulli-masked copy of the input and
//! produces a mean `μ_k`. During training the token is `z_k = μ_k + σ_k ε`
//! with a scalar `σ_k ~ N(0, Γ)` drawn per call and channel, where `Γ` is the
//! standard deviation of the first training batch. The decoder maps the
//! concatenated tokens back to the input space. At inference the mask and the
//! noise are disabled, so tokens equal their means.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamW, Bound, Mlp, Params};
use crate::rng::{seeded, standard_normal, streams, StreamRng};

pub const DEFAULT_GAMMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    /// Width `D` of the base embedding.
    pub input_dim: usize,
    /// Number of sub-encoders / tokens `K`.
    pub num_tokens: usize,
    /// Width `D_z` of each token.
    pub token_dim: usize,
    pub hidden: usize,
    /// Bernoulli mask ratio `ρ`.
    pub mask_ratio: f64,
    /// Prior-term weight `β`.
    pub beta: f64,
    pub gamma_floor: f64,
    pub activation: Activation,
}

impl TokenizerConfig {
    pub fn new(input_dim: usize, num_tokens: usize, token_dim: usize) -> Self {
        Self {
            input_dim,
            num_tokens,
            token_dim,
            hidden: 64,
            mask_ratio: 0.2,
            beta: 0.25,
            gamma_floor: DEFAULT_GAMMA_FLOOR,
            activation: Activation::Silu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tokens == 0 {
            return Err(Error::Config("tokenizer needs at least one sub-encoder".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if self.gamma_floor <= 0.0 {
            return Err(Error::Config("gamma floor must be positive".into()));
        }
        if self.input_dim == 0 || self.token_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("tokenizer widths must be positive".into()));
        }
        Ok(())
    }
}

/// `K` tokens for one entity plus the quantities they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousTokenSet {
    pub tokens: Vec<Array1<f64>>,
    pub means: Vec<Array1<f64>>,
    pub sigmas: Vec<f64>,
}

impl ContinuousTokenSet {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens stacked as a `K × D_z` matrix.
    pub fn token_matrix(&self) -> Array2<f64> {
        let views: Vec<_> = self.tokens.iter().map(|t| t.view().insert_axis(Axis(0))).collect();
        ndarray::concatenate(Axis(0), &views).expect("equal token widths")
    }
}

/// Zero each coordinate independently with probability `rho`.
pub fn bernoulli_mask<R: Rng + ?Sized>(x: ArrayView1<f64>, rho: f64, rng: &mut R) -> Array1<f64> {
    x.mapv(|v| if rng.random::<f64>() < rho { 0.0 } else { v })
}

/// Population standard deviation over every entry of the first batch, floored.
pub fn calibrate_gamma(first_batch: &Array2<f64>, floor: f64) -> Result<f64> {
    if first_batch.is_empty() {
        return Err(Error::Calibration("empty calibration batch".into()));
    }
    if first_batch.iter().any(|v| !v.is_finite()) {
        return Err(Error::Calibration("non-finite entry in calibration batch".into()));
    }
    let n = first_batch.len() as f64;
    let mean = first_batch.sum() / n;
    let var = first_batch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.sqrt().max(floor))
}

/// `‖x̂ − x‖² + (β/K) Σ_k ‖μ_k‖²` for a single entity.
pub fn vae_loss(x: ArrayView1<f64>, x_hat: ArrayView1<f64>, means: &[Array1<f64>], beta: f64) -> f64 {
    let recon: f64 = x.iter().zip(x_hat.iter()).map(|(a, b)| (b - a) * (b - a)).sum();
    let k = means.len().max(1) as f64;
    let prior: f64 = means.iter().map(|m| m.dot(m)).sum();
    recon + beta / k * prior
}

/// Mask and noise draws for one batched forward pass.
#[derive(Debug, Clone)]
pub struct TokenizerNoise {
    /// `B × D` keep-indicator (1 = kept, 0 = masked).
    pub keep: Array2<f64>,
    /// `B × K` scalar coefficients `σ_k`.
    pub sigma: Array2<f64>,
    /// `K` matrices of `B × D_z` standard normal draws.
    pub eps: Vec<Array2<f64>>,
}

impl TokenizerNoise {
    /// No masking and no latent noise.
    pub fn none(batch: usize, cfg: &TokenizerConfig) -> Self {
        Self {
            keep: Array2::ones((batch, cfg.input_dim)),
            sigma: Array2::zeros((batch, cfg.num_tokens)),
            eps: vec![Array2::zeros((batch, cfg.token_dim)); cfg.num_tokens],
        }
    }
}

/// Tape handles produced by [`SigmaVae::forward`].
#[derive(Debug, Clone)]
pub struct VaeForward {
    pub means: Vec<Var>,
    pub tokens: Vec<Var>,
    pub recon: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaVae {
    pub config: TokenizerConfig,
    pub params: Params,
    encoders: Vec<Mlp>,
    decoder: Mlp,
    gamma: Option<f64>,
}

impl SigmaVae {
    pub const CHECKPOINT_KIND: &'static str = "sigma-vae";

    pub fn new(config: TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed, streams::INIT);
        let mut params = Params::new();
        let (d, h, dz, k) = (config.input_dim, config.hidden, config.token_dim, config.num_tokens);
        let encoders = (0..k)
            .map(|i| Mlp::new(&mut params, &mut rng, &format!("encoder{i}"), &[d, h, h, dz], config.activation))
            .collect();
        let decoder = Mlp::new(&mut params, &mut rng, "decoder", &[k * dz, h, h, d], config.activation);
        Ok(Self { config, params, encoders, decoder, gamma: None })
    }

    pub fn gamma(&self) -> Option<f64> {
        self.gamma
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    /// Fix `Γ` from the first batch. Calibration happens once per model.
    pub fn calibrate(&mut self, first_batch: &Array2<f64>) -> Result<f64> {
        if let Some(g) = self.gamma {
            return Err(Error::Calibration(format!("Γ already calibrated to {g}")));
        }
        let g = calibrate_gamma(first_batch, self.config.gamma_floor)?;
        self.gamma = Some(g);
        Ok(g)
    }

    /// Draw mask and σ-kernel noise; inference draws nothing.
    pub fn sample_noise(&self, rng: &mut StreamRng, batch: usize, training: bool) -> Result<TokenizerNoise> {
        if !training {
            return Ok(TokenizerNoise::none(batch, &self.config));
        }
        let gamma = self.gamma.ok_or_else(|| Error::Calibration("Γ not calibrated".into()))?;
        let rho = self.config.mask_ratio;
        let keep = Array2::from_shape_fn((batch, self.config.input_dim), |_| {
            if rng.random::<f64>() < rho {
                0.0
            } else {
                1.0
            }
        });
        let sigma = Array2::from_shape_fn((batch, self.config.num_tokens), |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * gamma
        });
        let eps = (0..self.config.num_tokens).map(|_| standard_normal(rng, batch, self.config.token_dim)).collect();
        Ok(TokenizerNoise { keep, sigma, eps })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, noise: &TokenizerNoise) -> VaeForward {
        let keep = tape.leaf(noise.keep.clone());
        let masked = tape.mul(x, keep);
        let mut means = Vec::with_capacity(self.encoders.len());
        let mut tokens = Vec::with_capacity(self.encoders.len());
        for (k, enc) in self.encoders.iter().enumerate() {
            let mu = enc.forward(tape, p, masked);
            let sigma_col = noise.sigma.column(k).to_owned().insert_axis(Axis(1));
            let offset = tape.leaf(&noise.eps[k] * &sigma_col);
            tokens.push(tape.add(mu, offset));
            means.push(mu);
        }
        let joined = tape.concat_cols(&tokens);
        let recon = self.decoder.forward(tape, p, joined);
        VaeForward { means, tokens, recon }
    }

    /// Batch mean of the per-entity loss.
    pub fn loss(&self, tape: &mut Tape, x: Var, fwd: &VaeForward) -> Var {
        let batch = tape.shape(x).0 as f64;
        let diff = tape.sub(fwd.recon, x);
        let sq = tape.square(diff);
        let recon = tape.sum(sq);
        let mut total = tape.scale(recon, 1.0 / batch);
        let weight = self.config.beta / self.config.num_tokens as f64 / batch;
        if weight != 0.0 {
            for &mu in &fwd.means {
                let s = tape.square(mu);
                let s = tape.sum(s);
                let s = tape.scale(s, weight);
                total = tape.add(total, s);
            }
        }
        total
    }

    /// One optimiser step on `batch`; calibrates `Γ` on the first call.
    pub fn train_step(&mut self, opt: &mut AdamW, batch: &Array2<f64>, rng: &mut StreamRng) -> Result<f64> {
        if self.gamma.is_none() {
            self.calibrate(batch)?;
        }
        let noise = self.sample_noise(rng, batch.nrows(), true)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let x = tape.leaf(batch.clone());
        let fwd = self.forward(&mut tape, &p, x, &noise);
        let loss = self.loss(&mut tape, x, &fwd);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Diverged(format!("tokenizer loss {value}")));
        }
        let grads = self.params.grads(&p, &tape.backward(loss));
        opt.step(&mut self.params, &grads);
        Ok(value)
    }

    /// Tokenize with explicit mask/noise draws.
    pub fn tokenize_with(&self, x: &Array2<f64>, noise: &TokenizerNoise) -> Result<Vec<ContinuousTokenSet>> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Shape(format!("expected width {}, got {}", self.config.input_dim, x.ncols())));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let fwd = self.forward(&mut tape, &p, xv, noise);
        for (k, &mu) in fwd.means.iter().enumerate() {
            if tape.value(mu).iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric { component: format!("tokenizer channel {k}"), detail: "non-finite mean".into() });
            }
        }
        Ok((0..x.nrows())
            .map(|r| ContinuousTokenSet {
                tokens: fwd.tokens.iter().map(|&t| tape.value(t).row(r).to_owned()).collect(),
                means: fwd.means.iter().map(|&m| tape.value(m).row(r).to_owned()).collect(),
                sigmas: noise.sigma.row(r).to_vec(),
            })
            .collect())
    }

    pub fn tokenize(&self, x: ArrayView1<f64>, rng: &mut StreamRng, training: bool) -> Result<ContinuousTokenSet> {
        let x = x.to_owned().insert_axis(Axis(0));
        let noise = self.sample_noise(rng, 1, training)?;
        Ok(self.tokenize_with(&x, &noise)?.remove(0))
    }

    /// Deterministic inference tokens for every row of `x`.
    pub fn tokenize_batch(&self, x: &Array2<f64>) -> Result<Vec<ContinuousTokenSet>> {
        self.tokenize_with(x, &TokenizerNoise::none(x.nrows(), &self.config))
    }

    /// Deterministic inference means as a `B × (K·D_z)` matrix.
    pub fn encode_means(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let sets = self.tokenize_batch(x)?;
        let width = self.config.num_tokens * self.config.token_dim;
        let mut out = Array2::zeros((x.nrows(), width));
        for (r, s) in sets.iter().enumerate() {
            for (k, m) in s.means.iter().enumerate() {
                out.row_mut(r).slice_mut(ndarray::s![k * self.config.token_dim..(k + 1) * self.config.token_dim]).assign(m);
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ts: &ContinuousTokenSet) -> Result<Array1<f64>> {
        let expected = self.config.num_tokens * self.config.token_dim;
        let got: usize = ts.tokens.iter().map(|t| t.len()).sum();
        if ts.tokens.len() != self.config.num_tokens || got != expected {
            return Err(Error::Shape(format!("decoder expects {expected} token entries, got {got}")));
        }
        let joined = Array1::from_iter(ts.tokens.iter().flat_map(|t| t.iter().copied())).insert_axis(Axis(0));
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let z = tape.leaf(joined);
        let out = self.decoder.forward(&mut tape, &p, z);
        let row = tape.value(out).row(0).to_owned();
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { component: "decoder".into(), detail: "non-finite reconstruction".into() });
        }
        Ok(row)
    }

    /// Inference-path reconstruction of every row.
    pub fn reconstruct(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let fwd = self.forward(&mut tape, &p, xv, &TokenizerNoise::none(x.nrows(), &self.config));
        Ok(tape.value(fwd.recon).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use ndarray::array;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn small() -> SigmaVae {
        let mut cfg = TokenizerConfig::new(6, 3, 2);
        cfg.hidden = 5;
        SigmaVae::new(cfg, 11).unwrap()
    }

    #[test]
    fn mask_extremes() {
        let x = array![1.0, -2.0, 3.0];
        let mut rng = seeded(0, 0);
        assert_eq!(bernoulli_mask(x.view(), 0.0, &mut rng), x);
        assert_eq!(bernoulli_mask(x.view(), 1.0, &mut rng), Array1::<f64>::zeros(3));
    }

    #[test]
    fn mask_fraction_matches_ratio() {
        let x = Array1::from_elem(100_000, 1.0);
        let mut rng = seeded(42, 0);
        let masked = bernoulli_mask(x.view(), 0.2, &mut rng);
        let frac = masked.iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!(close(frac, 0.2, 0.01), "masked fraction {frac}");
    }

    #[test]
    fn mask_is_deterministic_under_seed() {
        let x = Array1::from_elem(64, 1.0);
        let a = bernoulli_mask(x.view(), 0.5, &mut seeded(3, 9));
        let b = bernoulli_mask(x.view(), 0.5, &mut seeded(3, 9));
        assert_eq!(a, b);
    }

    #[test]
    fn gamma_calibration_cases() {
        assert_eq!(calibrate_gamma(&array![[1.0, -1.0], [1.0, -1.0]], 1e-3).unwrap(), 1.0);
        assert_eq!(calibrate_gamma(&Array2::from_elem((4, 3), 2.5), 1e-3).unwrap(), 1e-3);
        let normal = standard_normal(&mut seeded(5, 0), 1024, 64);
        let g = calibrate_gamma(&normal, 1e-3).unwrap();
        assert!((0.95..=1.05).contains(&g), "Γ = {g}");
        assert!(calibrate_gamma(&array![[f64::NAN]], 1e-3).is_err());
    }

    #[test]
    fn gamma_is_calibrated_once() {
        let mut vae = small();
        vae.calibrate(&array![[1.0, 0.0, 0.0, 0.0, 0.0, 2.0]]).unwrap();
        assert!(vae.calibrate(&array![[5.0; 6]]).is_err());
    }

    #[test]
    fn inference_tokens_equal_means() {
        let vae = small();
        let x = array![0.3, -0.2, 0.9, 1.0, -1.0, 0.1];
        let ts = vae.tokenize(x.view(), &mut seeded(1, 1), false).unwrap();
        assert_eq!(ts.tokens, ts.means);
        assert_eq!(ts.len(), 3);
        let again = vae.tokenize(x.view(), &mut seeded(99, 2), false).unwrap();
        assert_eq!(ts, again);
    }

    #[test]
    fn zero_sigma_gives_mean_tokens() {
        let mut vae = small();
        vae.calibrate(&standard_normal(&mut seeded(1, 0), 4, 6)).unwrap();
        let x = standard_normal(&mut seeded(2, 0), 1, 6);
        let mut noise = vae.sample_noise(&mut seeded(3, 0), 1, true).unwrap();
        noise.sigma.fill(0.0);
        let ts = vae.tokenize_with(&x, &noise).unwrap().remove(0);
        assert_eq!(ts.tokens, ts.means);
    }

    #[test]
    fn token_noise_variance_is_gamma_squared() {
        let mut cfg = TokenizerConfig::new(64, 3, 4);
        cfg.hidden = 8;
        cfg.mask_ratio = 0.0;
        let mut vae = SigmaVae::new(cfg, 4).unwrap();
        let gamma = vae.calibrate(&standard_normal(&mut seeded(6, 0), 16, 64)).unwrap();
        let x = standard_normal(&mut seeded(7, 0), 1, 64);
        let xs = x.broadcast((10_000, 64)).unwrap().to_owned();
        let noise = vae.sample_noise(&mut seeded(8, 0), 10_000, true).unwrap();
        let sets = vae.tokenize_with(&xs, &noise).unwrap();
        for k in 0..3 {
            let diffs: Vec<f64> = sets.iter().flat_map(|s| (&s.tokens[k] - &s.means[k]).to_vec()).collect();
            let n = diffs.len() as f64;
            let mean = diffs.iter().sum::<f64>() / n;
            let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
            let expected = gamma * gamma;
            assert!((var - expected).abs() <= 0.05 * expected, "channel {k}: var {var} vs Γ² {expected}");
        }
    }

    #[test]
    fn decode_shapes_and_zero_layer() {
        let mut vae = small();
        let x = array![0.3, -0.2, 0.9, 1.0, -1.0, 0.1];
        let ts = vae.tokenize(x.view(), &mut seeded(1, 1), false).unwrap();
        assert_eq!(vae.decode(&ts).unwrap().len(), 6);

        let last = *vae.decoder().last_layer();
        vae.params.get_mut(last.weight).fill(0.0);
        *vae.params.get_mut(last.bias) = array![[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]];
        let zeros = ContinuousTokenSet {
            tokens: vec![Array1::zeros(2); 3],
            means: vec![Array1::zeros(2); 3],
            sigmas: vec![0.0; 3],
        };
        assert_eq!(vae.decode(&zeros).unwrap(), array![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let bad = ContinuousTokenSet { tokens: vec![Array1::zeros(2); 2], means: vec![], sigmas: vec![] };
        assert!(matches!(vae.decode(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_hand_values() {
        let x = array![0.0, 0.0];
        assert_eq!(vae_loss(x.view(), x.view(), &[array![0.0, 0.0]], 0.3), 0.0);
        let means = [array![1.0, 0.0], array![0.0, 0.0]];
        assert!((vae_loss(x.view(), array![1.0, 1.0].view(), &means, 0.5) - 2.25).abs() < 1e-15);
        assert_eq!(vae_loss(x.view(), array![1.0, 1.0].view(), &means, 0.0), 2.0);
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let mut vae = small();
        vae.calibrate(&standard_normal(&mut seeded(1, 0), 4, 6)).unwrap();
        let x = standard_normal(&mut seeded(2, 0), 4, 6);
        let noise = vae.sample_noise(&mut seeded(3, 0), 4, true).unwrap();
        let mut tape = Tape::new();
        let p = vae.params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let fwd = vae.forward(&mut tape, &p, xv, &noise);
        let loss_var = vae.loss(&mut tape, xv, &fwd);
        let loss = tape.scalar(loss_var);
        let recon = tape.value(fwd.recon);
        let mut plain = 0.0;
        for r in 0..4 {
            let means: Vec<_> = fwd.means.iter().map(|&m| tape.value(m).row(r).to_owned()).collect();
            plain += vae_loss(x.row(r), recon.row(r), &means, vae.config.beta);
        }
        assert!((loss - plain / 4.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut vae = small();
        vae.calibrate(&standard_normal(&mut seeded(1, 0), 4, 6)).unwrap();
        let x = standard_normal(&mut seeded(2, 0), 4, 6);
        let noise = vae.sample_noise(&mut seeded(3, 0), 4, true).unwrap();
        let report = gradcheck::check_params(&vae.params, gradcheck::DEFAULT_STEP, None, |tape, p| {
            let xv = tape.leaf(x.clone());
            let fwd = vae.forward(tape, p, xv, &noise);
            vae.loss(tape, xv, &fwd)
        });
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let mut vae = small();
        vae.calibrate(&standard_normal(&mut seeded(1, 0), 4, 6)).unwrap();
        let x = standard_normal(&mut seeded(2, 0), 4, 6);
        let noise = vae.sample_noise(&mut seeded(3, 0), 4, true).unwrap();
        let perm = [2usize, 0, 3, 1];
        let px = x.select(Axis(0), &perm);
        let pnoise = TokenizerNoise {
            keep: noise.keep.select(Axis(0), &perm),
            sigma: noise.sigma.select(Axis(0), &perm),
            eps: noise.eps.iter().map(|e| e.select(Axis(0), &perm)).collect(),
        };
        let eval = |x: &Array2<f64>, n: &TokenizerNoise| {
            let mut tape = Tape::new();
            let p = vae.params.bind(&mut tape);
            let xv = tape.leaf(x.clone());
            let fwd = vae.forward(&mut tape, &p, xv, n);
            let l = vae.loss(&mut tape, xv, &fwd);
            tape.scalar(l)
        };
        assert!((eval(&x, &noise) - eval(&px, &pnoise)).abs() < 1e-12);
    }
}
