//! Parameter storage, layers and the AdamW optimiser.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

/// Parameters bound as leaves on a tape, indexable by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.leaf(v.clone())).collect())
    }

    /// Gradients aligned with the parameter order.
    pub fn grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Array2<f64>> {
        bound.0.iter().map(|v| grads.get(*v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Silu => tape.silu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "silu" => Ok(Activation::Silu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(format!("unknown activation '{other}'")),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Activation::Silu => write!(f, "silu"),
            Activation::Tanh => write!(f, "tanh"),
        }
    }
}

pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

pub fn normal_init<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Affine map `x W + b` with `W: in × out`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(params: &mut Params, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = params.add(format!("{name}.weight"), uniform_init(rng, fan_in, fan_out, bound));
        let bias = params.add(format!("{name}.bias"), Array2::zeros((1, fan_out)));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p[self.weight]);
        tape.add_row(y, p[self.bias])
    }

    /// Plain forward without a tape.
    pub fn apply(&self, params: &Params, x: &Array2<f64>) -> Array2<f64> {
        x.dot(params.get(self.weight)) + params.get(self.bias)
    }
}

/// Multi-layer perceptron; the activation follows every layer but the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        rng: &mut R,
        name: &str,
        widths: &[usize],
        activation: Activation,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers, activation }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h);
            if i < last {
                h = self.activation.apply(tape, h);
            }
        }
        h
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }

    pub fn last_layer(&self) -> &Linear {
        self.layers.last().expect("non-empty mlp")
    }
}

/// Layer normalisation with learned gain and shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(params: &mut Params, name: &str, width: usize) -> Self {
        let gain = params.add(format!("{name}.gain"), Array2::ones((1, width)));
        let shift = params.add(format!("{name}.shift"), Array2::zeros((1, width)));
        Self { gain, shift }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let n = tape.layer_norm(x, Self::EPS);
        let n = tape.mul_row(n, p[self.gain]);
        tape.add_row(n, p[self.shift])
    }
}

/// Pre-norm transformer encoder layer with multi-head self-attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub width: usize,
    pub heads: usize,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
        ff_width: usize,
    ) -> Self {
        assert!(heads >= 1 && width.is_multiple_of(heads), "width must split evenly over heads");
        Self {
            norm_attn: LayerNorm::new(params, &format!("{name}.norm_attn"), width),
            query: Linear::new(params, rng, &format!("{name}.query"), width, width),
            key: Linear::new(params, rng, &format!("{name}.key"), width, width),
            value: Linear::new(params, rng, &format!("{name}.value"), width, width),
            out: Linear::new(params, rng, &format!("{name}.out"), width, width),
            norm_ff: LayerNorm::new(params, &format!("{name}.norm_ff"), width),
            ff_in: Linear::new(params, rng, &format!("{name}.ff_in"), width, ff_width),
            ff_out: Linear::new(params, rng, &format!("{name}.ff_out"), ff_width, width),
            width,
            heads,
        }
    }

    /// `mask` is added to the attention scores; use `-inf` to block a pair.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, mask: Option<&Array2<f64>>) -> Var {
        let h = self.norm_attn.forward(tape, p, x);
        let q = self.query.forward(tape, p, h);
        let k = self.key.forward(tape, p, h);
        let v = self.value.forward(tape, p, h);
        let head_width = self.width / self.heads;
        let scale = 1.0 / (head_width as f64).sqrt();
        let mask_var = mask.map(|m| tape.leaf(m.clone()));
        let mut heads = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let start = head * head_width;
            let qh = tape.slice_cols(q, start, head_width);
            let kh = tape.slice_cols(k, start, head_width);
            let vh = tape.slice_cols(v, start, head_width);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask_var {
                scores = tape.add(scores, m);
            }
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        let attn_out = self.out.forward(tape, p, merged);
        let x = tape.add(x, attn_out);
        let h = self.norm_ff.forward(tape, p, x);
        let f = self.ff_in.forward(tape, p, h);
        let f = tape.silu(f);
        let f = self.ff_out.forward(tape, p, f);
        tape.add(x, f)
    }
}

/// Additive causal mask: position `i` may attend to `j <= i`.
pub fn causal_mask(len: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, len), |(i, j)| if j <= i { 0.0 } else { f64::NEG_INFINITY })
}

/// Sinusoidal position/time table with `rows` entries of width `width`.
pub fn sinusoidal_table(rows: usize, width: usize) -> Array2<f64> {
    let half = width / 2;
    Array2::from_shape_fn((rows, width), |(pos, c)| {
        let i = if c < half { c } else { c - half };
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let angle = pos as f64 * freq;
        if c < half {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: Option<f64>,
    step: u64,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(params: &Params, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<_> = params.values().iter().map(|v| Array2::zeros(v.dim())).collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(1.0),
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut Params, grads: &[Array2<f64>]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let clip = match self.max_grad_norm {
            Some(max) => {
                let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let g = &grads[i];
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g * clip;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * self.weight_decay * *p;
                *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            });
        }
    }
}
