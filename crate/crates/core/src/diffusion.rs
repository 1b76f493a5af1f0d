//! Conditional DDPM head over target-item embeddings.

use std::path::Path;

use log::warn;
use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_table, Activation, AdamW, Bound, EncoderLayer, Linear, Params};
use crate::quantized::Reconstructor;
use crate::rng::{seeded, standard_normal, streams, StreamRng};

/// Variance schedule with a resampled inference subsequence. Steps are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub inference: Vec<usize>,
}

/// One reverse update between two retained steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseStep {
    pub t: usize,
    pub alpha_bar: f64,
    pub alpha_bar_prev: f64,
}

impl ReverseStep {
    pub fn beta(&self) -> f64 {
        1.0 - self.alpha_bar / self.alpha_bar_prev
    }

    pub fn posterior_variance(&self) -> f64 {
        self.beta() * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64, inference_steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0) || (steps > 1 && beta_start >= beta_end) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < start < end < 1, got {beta_start}..{beta_end}"
            )));
        }
        if inference_steps == 0 || inference_steps > steps {
            return Err(Error::Config(format!("inference steps {inference_steps} must lie in 1..={steps}")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        if betas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("beta schedule is not strictly increasing".into()));
        }
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let inference: Vec<usize> = if inference_steps == 1 {
            vec![steps]
        } else {
            (0..inference_steps)
                .map(|i| (1.0 + i as f64 * (steps - 1) as f64 / (inference_steps - 1) as f64).round() as usize)
                .collect()
        };
        debug_assert!(inference.windows(2).all(|w| w[0] < w[1]));
        Ok(Self { steps, betas, alpha_bars, inference })
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::InvalidArgument(format!("diffusion step {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn forward_noise(&self, y0: ArrayView1<f64>, t: usize, eps: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_step(t)?;
        if y0.len() != eps.len() {
            return Err(Error::Shape(format!("y0 width {} vs noise width {}", y0.len(), eps.len())));
        }
        let ab = self.alpha_bar(t);
        Ok(&y0 * ab.sqrt() + &eps * (1.0 - ab).sqrt())
    }

    /// Row-wise [`forward_noise`](Self::forward_noise) with a step per row.
    pub fn forward_noise_batch(&self, y0: &Array2<f64>, t: &[usize], eps: &Array2<f64>) -> Result<Array2<f64>> {
        if y0.dim() != eps.dim() || y0.nrows() != t.len() {
            return Err(Error::Shape("batch, step and noise shapes disagree".into()));
        }
        let mut out = Array2::zeros(y0.dim());
        for (i, &ti) in t.iter().enumerate() {
            out.row_mut(i).assign(&self.forward_noise(y0.row(i), ti, eps.row(i))?);
        }
        Ok(out)
    }

    /// Reverse updates from step `start` down to 0, visiting retained steps below `start`.
    pub fn reverse_plan(&self, start: usize) -> Vec<ReverseStep> {
        let mut kept: Vec<usize> = self.inference.iter().copied().filter(|&t| t < start).collect();
        if start > 0 {
            kept.push(start.min(self.steps));
        }
        (0..kept.len())
            .rev()
            .map(|i| ReverseStep {
                t: kept[i],
                alpha_bar: self.alpha_bar(kept[i]),
                alpha_bar_prev: if i == 0 { 1.0 } else { self.alpha_bar(kept[i - 1]) },
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub item_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub inference_steps: usize,
    pub uncond_prob: f64,
    pub temperature: f64,
    /// Noise draws per example in each training batch.
    pub repeats: usize,
    pub activation: Activation,
}

impl DiffusionConfig {
    pub fn new(item_dim: usize, cond_dim: usize) -> Self {
        Self {
            item_dim,
            cond_dim,
            hidden: 64,
            heads: 2,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            inference_steps: 100,
            uncond_prob: 0.1,
            temperature: 0.5,
            repeats: 1,
            activation: Activation::Silu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.item_dim == 0 || self.cond_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("diffusion widths must be positive".into()));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("hidden {} not divisible by heads {}", self.hidden, self.heads)));
        }
        if !(0.0..=1.0).contains(&self.uncond_prob) {
            return Err(Error::Config(format!("unconditional probability {} outside [0,1]", self.uncond_prob)));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("dispersive temperature must be positive".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("diffusion repeats must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Denoiser {
    cond_proj: Linear,
    time_proj: Linear,
    encoder: EncoderLayer,
    proj_in: Linear,
    fuse_in: Linear,
    fuse_out: Linear,
    proj_out: Linear,
    activation: Activation,
}

fn ensure_finite(tape: &Tape, v: Var, layer: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { component: "denoiser".into(), detail: format!("non-finite activations in {layer}") })
    }
}

/// Row `i` may attend to row `j` iff both belong to the same example.
fn pair_mask(batch: usize) -> Array2<f64> {
    Array2::from_shape_fn((2 * batch, 2 * batch), |(i, j)| if i % batch == j % batch { 0.0 } else { f64::NEG_INFINITY })
}

/// Anything that predicts noise for a batch at a shared step.
pub trait NoisePredictor {
    fn item_dim(&self) -> usize;
    fn predict(&self, y_t: &Array2<f64>, c: &Array2<f64>, t: usize) -> Result<Array2<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionHead {
    pub config: DiffusionConfig,
    pub schedule: NoiseSchedule,
    pub params: Params,
    /// Null condition used for unconditional training and guidance.
    pub phi: Array1<f64>,
    time_table: Array2<f64>,
    denoiser: Denoiser,
}

/// Loss terms of one training batch.
#[derive(Debug, Clone, Copy)]
pub struct DiffusionTerms {
    pub diffusion: Var,
    pub dispersive: Var,
    pub hidden: Var,
}

impl DiffusionHead {
    pub const KIND: &'static str = "diffusion-head";

    pub fn new(config: DiffusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::linear(config.steps, config.beta_start, config.beta_end, config.inference_steps)?;
        let mut rng = seeded(seed, streams::INIT);
        let mut params = Params::new();
        let (d, c, h) = (config.item_dim, config.cond_dim, config.hidden);
        let denoiser = Denoiser {
            cond_proj: Linear::new(&mut params, &mut rng, "cond_proj", c, h),
            time_proj: Linear::new(&mut params, &mut rng, "time_proj", h, h),
            encoder: EncoderLayer::new(&mut params, &mut rng, "cond_encoder", h, config.heads, 2 * h),
            proj_in: Linear::new(&mut params, &mut rng, "proj_in", d, h),
            fuse_in: Linear::new(&mut params, &mut rng, "fuse.0", 2 * h, 2 * h),
            fuse_out: Linear::new(&mut params, &mut rng, "fuse.1", 2 * h, h),
            proj_out: Linear::new(&mut params, &mut rng, "proj_out", h, d),
            activation: config.activation,
        };
        let phi = standard_normal(&mut seeded(seed, streams::DUMMY_CONDITION), 1, c).row(0).to_owned();
        let time_table = sinusoidal_table(config.steps, h);
        Ok(Self { config, schedule, params, phi, time_table, denoiser })
    }

    pub fn time_table(&self) -> &Array2<f64> {
        &self.time_table
    }

    pub fn zero_output_projection(&mut self) {
        self.params.get_mut(self.denoiser.proj_out.weight).fill(0.0);
        self.params.get_mut(self.denoiser.proj_out.bias).fill(0.0);
    }

    /// Parameter names belonging to the output projection.
    pub fn is_output_projection(name: &str) -> bool {
        name.starts_with("proj_out")
    }

    /// Noise prediction `ε̂` and fusion representation `h` on a tape.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, y_t: Var, c: Var, t: &[usize]) -> Result<(Var, Var)> {
        let batch = t.len();
        if tape.shape(y_t) != (batch, self.config.item_dim) || tape.shape(c) != (batch, self.config.cond_dim) {
            return Err(Error::Shape(format!(
                "denoiser expects {batch}x{} items and {batch}x{} conditions, got {:?} and {:?}",
                self.config.item_dim,
                self.config.cond_dim,
                tape.shape(y_t),
                tape.shape(c)
            )));
        }
        for &ti in t {
            self.schedule.check_step(ti)?;
        }
        let net = &self.denoiser;
        let rows: Vec<usize> = t.iter().map(|&ti| ti - 1).collect();
        let times = tape.leaf(self.time_table.select(Axis(0), &rows));
        let ct = net.cond_proj.forward(tape, p, c);
        let te = net.time_proj.forward(tape, p, times);
        let tokens = tape.concat_rows(&[ct, te]);
        let encoded = net.encoder.forward(tape, p, tokens, Some(&pair_mask(batch)));
        ensure_finite(tape, encoded, "condition encoder")?;
        let first = tape.slice_rows(encoded, 0, batch);
        let second = tape.slice_rows(encoded, batch, batch);
        let context = tape.add(first, second);
        let context = tape.scale(context, 0.5);

        let yin = net.proj_in.forward(tape, p, y_t);
        let joined = tape.concat_cols(&[yin, context]);
        let f = net.fuse_in.forward(tape, p, joined);
        let f = net.activation.apply(tape, f);
        let f = net.fuse_out.forward(tape, p, f);
        let h = tape.add(yin, f);
        ensure_finite(tape, h, "fusion feed-forward")?;
        let eps = net.proj_out.forward(tape, p, h);
        ensure_finite(tape, eps, "output projection")?;
        Ok((eps, h))
    }

    /// Tape-free forward returning `(ε̂, h)`.
    pub fn predict_noise(&self, y_t: &Array2<f64>, c: &Array2<f64>, t: &[usize]) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let y = tape.leaf(y_t.clone());
        let cv = tape.leaf(c.clone());
        let (eps, h) = self.forward(&mut tape, &p, y, cv, t)?;
        Ok((tape.value(eps).clone(), tape.value(h).clone()))
    }

    /// Replace rows flagged in `uncond` by the null condition.
    pub fn substitute_dummy(&self, tape: &mut Tape, c: Var, uncond: &[bool]) -> Var {
        if !uncond.iter().any(|&u| u) {
            return c;
        }
        let keep = Array2::from_shape_fn((uncond.len(), 1), |(i, _)| if uncond[i] { 0.0 } else { 1.0 });
        let keep = tape.leaf(keep);
        let kept = tape.mul_col(c, keep);
        let fill = Array2::from_shape_fn((uncond.len(), self.config.cond_dim), |(i, j)| if uncond[i] { self.phi[j] } else { 0.0 });
        let fill = tape.leaf(fill);
        tape.add(kept, fill)
    }

    /// Diffusion and dispersive losses for fixed steps, noise and dummy flags.
    #[allow(clippy::too_many_arguments)]
    pub fn losses_with(
        &self,
        tape: &mut Tape,
        p: &Bound,
        c: Var,
        y0: &Array2<f64>,
        t: &[usize],
        eps: &Array2<f64>,
        uncond: &[bool],
    ) -> Result<DiffusionTerms> {
        if uncond.len() != t.len() {
            return Err(Error::Shape("one dummy flag per row required".into()));
        }
        let y_t = tape.leaf(self.schedule.forward_noise_batch(y0, t, eps)?);
        let c = self.substitute_dummy(tape, c, uncond);
        let (eps_hat, hidden) = self.forward(tape, p, y_t, c, t)?;
        let target = tape.leaf(eps.clone());
        let diffusion = diffusion_loss(tape, eps_hat, target);
        let dispersive = dispersive_loss(tape, hidden, self.config.temperature);
        Ok(DiffusionTerms { diffusion, dispersive, hidden })
    }

    /// Sample steps, noise and dummy flags, then compute the losses.
    /// Each example is repeated `config.repeats` times with independent draws.
    pub fn losses(&self, tape: &mut Tape, p: &Bound, c: Var, y0: &Array2<f64>, rng: &mut StreamRng) -> Result<DiffusionTerms> {
        let (c, y0) = if self.config.repeats > 1 {
            let idx: Vec<usize> = (0..self.config.repeats).flat_map(|_| 0..y0.nrows()).collect();
            (tape.gather_rows(c, &idx), y0.select(Axis(0), &idx))
        } else {
            (c, y0.clone())
        };
        let n = y0.nrows();
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=self.schedule.steps)).collect();
        let eps = standard_normal(rng, n, self.config.item_dim);
        let uncond: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < self.config.uncond_prob).collect();
        self.losses_with(tape, p, c, &y0, &t, &eps, &uncond)
    }

    /// Guided samples, one rng stream per row.
    pub fn sample(&self, c: &Array2<f64>, omega: f64, rngs: &mut [StreamRng]) -> Result<Array2<f64>> {
        cfg_sample(self, &self.schedule, c, self.phi.view(), omega, rngs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, Self::KIND, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load(path, Self::KIND)
    }
}

impl NoisePredictor for DiffusionHead {
    fn item_dim(&self) -> usize {
        self.config.item_dim
    }

    fn predict(&self, y_t: &Array2<f64>, c: &Array2<f64>, t: usize) -> Result<Array2<f64>> {
        Ok(self.predict_noise(y_t, c, &vec![t; y_t.nrows()])?.0)
    }
}

/// Mean over rows of the squared noise-prediction error.
pub fn diffusion_loss(tape: &mut Tape, eps_hat: Var, eps: Var) -> Var {
    let rows = tape.shape(eps).0 as f64;
    let diff = tape.sub(eps_hat, eps);
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    tape.scale(total, 1.0 / rows)
}

/// `log(mean_{i,b} exp(−‖h_i − h_b‖² / ι))`, self-pairs included.
pub fn dispersive_loss(tape: &mut Tape, h: Var, temperature: f64) -> Var {
    if tape.shape(h).0 < 2 {
        warn!("dispersive loss on a batch of one row is zero");
        return tape.leaf(Array2::zeros((1, 1)));
    }
    let d = tape.pairwise_sq_dist(h);
    let scaled = tape.scale(d, -1.0 / temperature);
    let k = tape.exp(scaled);
    let m = tape.mean(k);
    tape.log(m)
}

/// Classifier-free guided ancestral sampling from pure noise.
pub fn cfg_sample<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    c: &Array2<f64>,
    phi: ArrayView1<f64>,
    omega: f64,
    rngs: &mut [StreamRng],
) -> Result<Array2<f64>> {
    let dim = model.item_dim();
    if rngs.len() != c.nrows() {
        return Err(Error::Shape(format!("{} rng streams for {} conditions", rngs.len(), c.nrows())));
    }
    let mut y = Array2::zeros((c.nrows(), dim));
    for (i, rng) in rngs.iter_mut().enumerate() {
        y.row_mut(i).assign(&standard_normal(rng, 1, dim).row(0));
    }
    denoise_from(model, schedule, y, schedule.steps, c, phi, omega, rngs)
}

/// Reverse process starting from `y` at step `start`.
#[allow(clippy::too_many_arguments)]
pub fn denoise_from<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    mut y: Array2<f64>,
    start: usize,
    c: &Array2<f64>,
    phi: ArrayView1<f64>,
    omega: f64,
    rngs: &mut [StreamRng],
) -> Result<Array2<f64>> {
    if omega < 0.0 {
        return Err(Error::InvalidArgument(format!("guidance strength {omega} must be >= 0")));
    }
    let b = y.nrows();
    if c.nrows() != b || rngs.len() != b {
        return Err(Error::Shape("samples, conditions and rng streams disagree".into()));
    }
    let null = phi.broadcast((b, phi.len())).ok_or_else(|| Error::Shape("null condition width".into()))?.to_owned();
    let conds = ndarray::concatenate(Axis(0), &[c.view(), null.view()]).map_err(|e| Error::Shape(e.to_string()))?;
    let plan = schedule.reverse_plan(start);
    let last = plan.len().saturating_sub(1);
    for (k, step) in plan.iter().enumerate() {
        let stacked = ndarray::concatenate(Axis(0), &[y.view(), y.view()]).map_err(|e| Error::Shape(e.to_string()))?;
        let both = model.predict(&stacked, &conds, step.t)?;
        let cond = both.slice(s![0..b, ..]);
        let uncond = both.slice(s![b.., ..]);
        let guided = &cond + &((&cond - &uncond) * omega);
        let beta = step.beta();
        let coef = beta / (1.0 - step.alpha_bar).sqrt();
        y = (&y - &(guided * coef)) / (1.0 - beta).sqrt();
        if k < last {
            let sd = step.posterior_variance().sqrt();
            for (i, rng) in rngs.iter_mut().enumerate() {
                let z = standard_normal(rng, 1, y.ncols());
                let mut row = y.row_mut(i);
                row.scaled_add(sd, &z.row(0));
            }
        }
    }
    Ok(y)
}

/// Unconditional diffusion autoencoder: noise to `t*`, then denoise back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionReconstructor {
    pub head: DiffusionHead,
    pub t_star: usize,
}

impl DiffusionReconstructor {
    pub fn new(input_dim: usize, hidden: usize, steps: usize, inference_steps: usize, seed: u64) -> Result<Self> {
        let mut config = DiffusionConfig::new(input_dim, 1);
        config.hidden = hidden;
        config.steps = steps;
        config.inference_steps = inference_steps;
        config.uncond_prob = 0.0;
        let head = DiffusionHead::new(config, seed)?;
        Ok(Self { head, t_star: steps / 2 })
    }

    pub fn reconstruct_at(&self, x: &Array2<f64>, t_star: usize, seed: u64) -> Result<Array2<f64>> {
        let n = x.nrows();
        let c = Array2::zeros((n, 1));
        if t_star == 0 {
            return Ok(x.clone());
        }
        let mut rngs: Vec<StreamRng> = (0..n).map(|i| seeded(seed, streams::INFERENCE_BASE + i as u64)).collect();
        let mut y = Array2::zeros(x.dim());
        for (i, rng) in rngs.iter_mut().enumerate() {
            let eps = standard_normal(rng, 1, x.ncols());
            y.row_mut(i).assign(&self.head.schedule.forward_noise(x.row(i), t_star, eps.row(0))?);
        }
        let phi = Array1::zeros(1);
        denoise_from(&self.head, &self.head.schedule, y, t_star, &c, phi.view(), 0.0, &mut rngs)
    }
}

impl Reconstructor for DiffusionReconstructor {
    fn name(&self) -> &'static str {
        "diffusion"
    }

    fn params(&self) -> &Params {
        &self.head.params
    }

    fn train_step(&mut self, opt: &mut AdamW, batch: &Array2<f64>, rng: &mut StreamRng) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.head.params.bind(&mut tape);
        let c = tape.leaf(Array2::zeros((batch.nrows(), 1)));
        let terms = self.head.losses(&mut tape, &p, c, batch, rng)?;
        let value = tape.scalar(terms.diffusion);
        if !value.is_finite() {
            return Err(Error::Diverged(format!("diffusion loss {value}")));
        }
        let grads = self.head.params.grads(&p, &tape.backward(terms.diffusion));
        opt.step(&mut self.head.params, &grads);
        Ok(value)
    }

    fn reconstruct(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.reconstruct_at(x, self.t_star, 0)
    }
}
