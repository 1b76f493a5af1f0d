//! Small causal sequence model over hybrid continuous/discrete token streams.
//!
//! Vocabulary layout: `PAD, Z_START, Z_END, ANS`, then one id per category,
//! then one id per brand. A prompt is
//! `[Z_START user… Z_END] ([cat brand Z_START item… Z_END])* ANS`, and the model
//! predicts the target category at `ANS` and the target brand at the position
//! holding the (teacher-forced or generated) category.

use std::path::Path;

use log::info;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint;
use crate::data::LabelVocab;
use crate::error::{Error, Result};
use crate::nn::{causal_mask, normal_init, sinusoidal_table, Activation, Bound, EncoderLayer, LayerNorm, Linear, Mlp, Params};
use crate::rng::{seeded, streams};

pub const PAD: usize = 0;
pub const Z_START: usize = 1;
pub const Z_END: usize = 2;
pub const ANS: usize = 3;
const SPECIAL: usize = 4;

/// Version of the token layout produced by [`Layout::build`].
pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    User,
    Item,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Token {
    Discrete(usize),
    Continuous { block: Block, vector: Array1<f64> },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HybridSequence {
    pub tokens: Vec<Token>,
    pub num_items: usize,
}

impl HybridSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn continuous_count(&self) -> usize {
        self.tokens.iter().filter(|t| matches!(t, Token::Continuous { .. })).count()
    }

    /// Position of the answer marker, if present.
    pub fn answer_position(&self) -> Option<usize> {
        self.tokens.iter().position(|t| *t == Token::Discrete(ANS))
    }

    pub fn push(&mut self, id: usize) {
        self.tokens.push(Token::Discrete(id));
    }
}

/// One history entry: `K × D_z` tokens plus label indices.
#[derive(Debug, Clone, Copy)]
pub struct ItemBlock<'a> {
    pub tokens: ArrayView2<'a, f64>,
    pub category: usize,
    pub brand: usize,
}

/// Vocabulary and sequence layout rules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub num_categories: usize,
    pub num_brands: usize,
    pub num_tokens: usize,
    pub max_items: usize,
}

impl Layout {
    pub fn vocab_size(&self) -> usize {
        SPECIAL + self.num_categories + self.num_brands
    }

    pub fn category_token(&self, c: usize) -> Result<usize> {
        if c >= self.num_categories {
            return Err(Error::UnknownLabel(c));
        }
        Ok(SPECIAL + c)
    }

    pub fn brand_token(&self, b: usize) -> Result<usize> {
        if b >= self.num_brands {
            return Err(Error::UnknownLabel(b));
        }
        Ok(SPECIAL + self.num_categories + b)
    }

    pub fn category_range(&self) -> std::ops::Range<usize> {
        SPECIAL..SPECIAL + self.num_categories
    }

    pub fn brand_range(&self) -> std::ops::Range<usize> {
        SPECIAL + self.num_categories..self.vocab_size()
    }

    /// Longest prompt (with answer marker and category) the layout can produce.
    pub fn max_len(&self) -> usize {
        self.num_tokens + 2 + self.max_items * (self.num_tokens + 4) + 2
    }

    fn push_block(&self, seq: &mut HybridSequence, block: Block, tokens: ArrayView2<f64>) -> Result<()> {
        if tokens.nrows() != self.num_tokens {
            return Err(Error::Shape(format!("expected {} tokens per block, got {}", self.num_tokens, tokens.nrows())));
        }
        seq.push(Z_START);
        for row in tokens.rows() {
            seq.tokens.push(Token::Continuous { block, vector: row.to_owned() });
        }
        seq.push(Z_END);
        Ok(())
    }

    /// Prompt without the answer marker. Histories longer than `max_items`
    /// keep their most recent entries.
    pub fn build(&self, user: ArrayView2<f64>, history: &[ItemBlock]) -> Result<HybridSequence> {
        let history = if history.len() > self.max_items {
            info!("truncating history of {} items to the latest {}", history.len(), self.max_items);
            &history[history.len() - self.max_items..]
        } else {
            history
        };
        let mut seq = HybridSequence::default();
        self.push_block(&mut seq, Block::User, user)?;
        for item in history {
            seq.push(self.category_token(item.category)?);
            seq.push(self.brand_token(item.brand)?);
            self.push_block(&mut seq, Block::Item, item.tokens)?;
            seq.num_items += 1;
        }
        Ok(seq)
    }

    /// Prompt followed by the answer marker.
    pub fn query(&self, user: ArrayView2<f64>, history: &[ItemBlock]) -> Result<HybridSequence> {
        let mut seq = self.build(user, history)?;
        seq.push(ANS);
        Ok(seq)
    }

    /// Query with the target category appended, for teacher forcing.
    pub fn training_sequence(&self, user: ArrayView2<f64>, history: &[ItemBlock], category: usize) -> Result<HybridSequence> {
        let mut seq = self.query(user, history)?;
        seq.push(self.category_token(category)?);
        Ok(seq)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layout: Layout,
    pub token_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub cond_dim: usize,
    pub activation: Activation,
}

impl BackboneConfig {
    pub fn new(layout: Layout, token_dim: usize, cond_dim: usize) -> Self {
        Self { layout, token_dim, width: 32, heads: 2, layers: 2, cond_dim, activation: Activation::Silu }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.layers) {
            return Err(Error::Config(format!("backbone layers {} outside 1..=4", self.layers)));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} not divisible by heads {}", self.width, self.heads)));
        }
        if self.layout.num_categories == 0 || self.layout.num_brands == 0 {
            return Err(Error::Config("label vocabulary is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BackboneOutput {
    /// `L × W` final hidden states.
    pub hidden: Var,
    /// `L × V` label logits.
    pub logits: Var,
}

/// Greedy decoding result.
#[derive(Debug, Clone, PartialEq)]
pub struct Semantics {
    pub category: usize,
    pub brand: usize,
    pub condition: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub labels: LabelVocab,
    pub layout_version: u32,
    pub params: Params,
    embed: crate::nn::ParamId,
    block_embed: crate::nn::ParamId,
    cont_in: Linear,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    head: Linear,
    cond_norm: LayerNorm,
    condition_net: Mlp,
}

fn argmax_in(row: ndarray::ArrayView1<f64>, range: std::ops::Range<usize>) -> usize {
    let mut best = range.start;
    for i in range {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

impl Backbone {
    pub const KIND: &'static str = "backbone";

    pub fn new(config: BackboneConfig, labels: LabelVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if labels.categories.len() != config.layout.num_categories || labels.brands.len() != config.layout.num_brands {
            return Err(Error::Config("label vocabulary does not match the layout".into()));
        }
        let mut rng = seeded(seed, streams::INIT);
        let mut params = Params::new();
        let w = config.width;
        let scale = 1.0 / (w as f64).sqrt();
        let embed = params.add("embed", normal_init(&mut rng, config.layout.vocab_size(), w, scale));
        let block_embed = params.add("block_embed", normal_init(&mut rng, 2, w, scale));
        let cont_in = Linear::new(&mut params, &mut rng, "cont_in", config.token_dim, w);
        let layers = (0..config.layers)
            .map(|i| EncoderLayer::new(&mut params, &mut rng, &format!("layer{i}"), w, config.heads, 2 * w))
            .collect();
        let final_norm = LayerNorm::new(&mut params, "final_norm", w);
        let head = Linear::new(&mut params, &mut rng, "head", w, config.layout.vocab_size());
        let cond_norm = LayerNorm::new(&mut params, "condition_net.norm", w);
        let condition_net = Mlp::new(&mut params, &mut rng, "condition_net", &[w, w, config.cond_dim], config.activation);
        Ok(Self {
            config,
            labels,
            layout_version: LAYOUT_VERSION,
            params,
            embed,
            block_embed,
            cont_in,
            layers,
            final_norm,
            head,
            cond_norm,
            condition_net,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.config.layout
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, seq: &HybridSequence) -> Result<BackboneOutput> {
        let len = seq.len();
        if len == 0 {
            return Err(Error::InvalidArgument("empty sequence".into()));
        }
        if len > self.layout().max_len() {
            return Err(Error::InvalidArgument(format!("sequence length {len} exceeds cap {}", self.layout().max_len())));
        }
        let dz = self.config.token_dim;
        let mut ids = vec![PAD; len];
        let mut blocks = vec![0; len];
        let mut discrete = Array2::zeros((len, 1));
        let mut continuous = Array2::zeros((len, 1));
        let mut vectors = Array2::zeros((len, dz));
        for (i, tok) in seq.tokens.iter().enumerate() {
            match tok {
                Token::Discrete(id) => {
                    if *id >= self.layout().vocab_size() {
                        return Err(Error::UnknownLabel(*id));
                    }
                    ids[i] = *id;
                    discrete[[i, 0]] = 1.0;
                }
                Token::Continuous { block, vector } => {
                    if vector.len() != dz {
                        return Err(Error::Shape(format!("continuous token width {} vs {dz}", vector.len())));
                    }
                    vectors.row_mut(i).assign(vector);
                    blocks[i] = if *block == Block::User { 0 } else { 1 };
                    continuous[[i, 0]] = 1.0;
                }
            }
        }
        let disc = tape.gather_rows(p[self.embed], &ids);
        let dmask = tape.leaf(discrete);
        let disc = tape.mul_col(disc, dmask);
        let v = tape.leaf(vectors);
        let cont = self.cont_in.forward(tape, p, v);
        let kinds = tape.gather_rows(p[self.block_embed], &blocks);
        let cont = tape.add(cont, kinds);
        let cmask = tape.leaf(continuous);
        let cont = tape.mul_col(cont, cmask);
        let x = tape.add(disc, cont);
        let pos = tape.leaf(sinusoidal_table(len, self.config.width));
        let mut h = tape.add(x, pos);
        let mask = causal_mask(len);
        for layer in &self.layers {
            h = layer.forward(tape, p, h, Some(&mask));
        }
        let hidden = self.final_norm.forward(tape, p, h);
        if tape.value(hidden).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { component: "backbone".into(), detail: "non-finite hidden states".into() });
        }
        let logits = self.head.forward(tape, p, hidden);
        Ok(BackboneOutput { hidden, logits })
    }

    /// Positions whose outputs are generated: the answer marker and the category slot.
    pub fn generated_positions(seq: &HybridSequence) -> Result<Vec<usize>> {
        let ans = seq.answer_position().ok_or_else(|| Error::InvalidArgument("sequence has no answer marker".into()))?;
        Ok(if ans + 1 < seq.len() { vec![ans, ans + 1] } else { vec![ans] })
    }

    /// Mean-pool rows of `hidden` at `positions`, giving `1 × W`.
    pub fn pool(tape: &mut Tape, hidden: Var, positions: &[usize]) -> Result<Var> {
        if positions.is_empty() {
            return Err(Error::InvalidArgument("no generated positions to aggregate".into()));
        }
        let rows = tape.gather_rows(hidden, positions);
        Ok(tape.mean_rows(rows))
    }

    /// `condition_net(LayerNorm(pooled))` for a `B × W` stack of pooled states.
    pub fn aggregate_condition(&self, tape: &mut Tape, p: &Bound, pooled: Var) -> Var {
        let n = self.cond_norm.forward(tape, p, pooled);
        self.condition_net.forward(tape, p, n)
    }

    /// Teacher-forced pass over a batch of training sequences.
    /// Returns the label loss and the `B × D_c` conditions.
    pub fn train_forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        seqs: &[HybridSequence],
        brands: &[usize],
    ) -> Result<(Var, Var)> {
        if seqs.is_empty() || seqs.len() != brands.len() {
            return Err(Error::Shape("one brand target per sequence required".into()));
        }
        let mut rows = Vec::with_capacity(seqs.len());
        let mut targets = Vec::with_capacity(2 * seqs.len());
        let mut pooled = Vec::with_capacity(seqs.len());
        for (seq, &brand) in seqs.iter().zip(brands) {
            let positions = Self::generated_positions(seq)?;
            if positions.len() != 2 {
                return Err(Error::InvalidArgument("training sequence lacks the target category".into()));
            }
            let category = match seq.tokens[positions[1]] {
                Token::Discrete(id) if self.layout().category_range().contains(&id) => id,
                _ => return Err(Error::InvalidArgument("token after the answer marker is not a category".into())),
            };
            let out = self.forward(tape, p, seq)?;
            rows.push(tape.gather_rows(out.logits, &positions));
            targets.push(category);
            targets.push(self.layout().brand_token(brand)?);
            pooled.push(Self::pool(tape, out.hidden, &positions)?);
        }
        let logits = tape.concat_rows(&rows);
        let loss = llm_loss(tape, logits, &targets);
        let pooled = tape.concat_rows(&pooled);
        let cond = self.aggregate_condition(tape, p, pooled);
        Ok((loss, cond))
    }

    /// Greedy category then brand, plus the condition from both generated positions.
    pub fn predict_semantics(&self, query: &HybridSequence) -> Result<Semantics> {
        let ans = query.answer_position().ok_or_else(|| Error::InvalidArgument("query has no answer marker".into()))?;
        if ans + 1 != query.len() {
            return Err(Error::InvalidArgument("query must end at the answer marker".into()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &p, query)?;
        let cat_id = argmax_in(tape.value(out.logits).row(ans), self.layout().category_range());
        let mut seq = query.clone();
        seq.push(cat_id);
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &p, &seq)?;
        let brand_id = argmax_in(tape.value(out.logits).row(ans + 1), self.layout().brand_range());
        let pooled = Self::pool(&mut tape, out.hidden, &[ans, ans + 1])?;
        let cond = self.aggregate_condition(&mut tape, &p, pooled);
        Ok(Semantics {
            category: cat_id - SPECIAL,
            brand: brand_id - self.layout().brand_range().start,
            condition: tape.value(cond).row(0).to_owned(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, Self::KIND, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b: Self = checkpoint::load(path, Self::KIND)?;
        if b.layout_version != LAYOUT_VERSION {
            return Err(Error::Checkpoint(format!("sequence layout version {} is not supported", b.layout_version)));
        }
        Ok(b)
    }
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
pub fn llm_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Var {
    tape.cross_entropy(logits, targets)
}

/// Token matrix `K × D_z` from a flat `K·D_z` row.
pub fn token_rows(flat: ndarray::ArrayView1<f64>, num_tokens: usize) -> Array2<f64> {
    let dz = flat.len() / num_tokens;
    flat.to_owned().into_shape_with_order((num_tokens, dz)).expect("row splits evenly into tokens")
}

/// Stack per-row token blocks along rows.
pub fn stack_blocks(blocks: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal token widths")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::nn::AdamW;
    use crate::rng::standard_normal;
    use ndarray::array;

    fn labels(c: usize, b: usize) -> LabelVocab {
        LabelVocab {
            categories: (0..c).map(|i| format!("c{i}")).collect(),
            brands: (0..b).map(|i| format!("b{i}")).collect(),
        }
    }

    fn layout(k: usize) -> Layout {
        Layout { num_categories: 2, num_brands: 3, num_tokens: k, max_items: 20 }
    }

    fn model(width: usize, layers: usize, seed: u64) -> Backbone {
        let mut cfg = BackboneConfig::new(layout(2), 3, 4);
        cfg.width = width;
        cfg.layers = layers;
        Backbone::new(cfg, labels(2, 3), seed).unwrap()
    }

    #[test]
    fn layout_rules() {
        let l = layout(3);
        let user = Array2::ones((3, 2));
        let seq = l.build(user.view(), &[]).unwrap();
        assert_eq!(seq.len(), 5);
        assert_eq!(seq.continuous_count(), 3);
        let item = Array2::zeros((3, 2));
        let blocks: Vec<ItemBlock> = (0..2).map(|i| ItemBlock { tokens: item.view(), category: i % 2, brand: 1 }).collect();
        let seq = l.build(user.view(), &blocks).unwrap();
        assert_eq!(seq.num_items, 2);
        assert_eq!(seq.tokens[5], Token::Discrete(SPECIAL));
        assert_eq!(seq.tokens[7], Token::Discrete(Z_START));
        assert_eq!(seq.tokens[11], Token::Discrete(Z_END));
        let blocks20: Vec<ItemBlock> = (0..20).map(|_| ItemBlock { tokens: item.view(), category: 0, brand: 0 }).collect();
        assert_eq!(l.build(user.view(), &blocks20).unwrap().continuous_count(), 63);
        let bad = [ItemBlock { tokens: item.view(), category: 7, brand: 0 }];
        assert!(matches!(l.build(user.view(), &bad), Err(Error::UnknownLabel(7))));
        let blocks25: Vec<ItemBlock> = (0..25).map(|_| ItemBlock { tokens: item.view(), category: 0, brand: 0 }).collect();
        assert_eq!(l.build(user.view(), &blocks25).unwrap().num_items, 20);
    }

    #[test]
    fn every_continuous_run_is_bracketed() {
        let l = layout(2);
        let tok = standard_normal(&mut seeded(1, 0), 2, 3);
        let blocks: Vec<ItemBlock> = (0..4).map(|i| ItemBlock { tokens: tok.view(), category: i % 2, brand: i % 3 }).collect();
        let seq = l.build(tok.view(), &blocks).unwrap();
        let mut inside = false;
        for (i, t) in seq.tokens.iter().enumerate() {
            match t {
                Token::Continuous { .. } => assert!(inside, "unbracketed token at {i}"),
                Token::Discrete(Z_START) => inside = true,
                Token::Discrete(Z_END) => inside = false,
                _ => assert!(!inside),
            }
        }
    }

    #[test]
    fn single_position_logit_shape() {
        let m = model(8, 1, 2);
        let mut seq = HybridSequence::default();
        seq.push(ANS);
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let out = m.forward(&mut tape, &p, &seq).unwrap();
        assert_eq!(tape.shape(out.logits), (1, m.layout().vocab_size()));
    }

    #[test]
    fn future_tokens_do_not_affect_earlier_logits() {
        let m = model(8, 2, 3);
        let l = m.layout().clone();
        let user = standard_normal(&mut seeded(4, 0), 2, 3);
        let a = standard_normal(&mut seeded(5, 0), 2, 3);
        let b = standard_normal(&mut seeded(6, 0), 2, 3);
        let s1 = l.query(user.view(), &[ItemBlock { tokens: a.view(), category: 0, brand: 1 }, ItemBlock { tokens: b.view(), category: 1, brand: 2 }]).unwrap();
        let s2 = l.query(user.view(), &[ItemBlock { tokens: a.view(), category: 0, brand: 1 }, ItemBlock { tokens: a.view(), category: 0, brand: 0 }]).unwrap();
        let run = |s: &HybridSequence| {
            let mut tape = Tape::new();
            let p = m.params.bind(&mut tape);
            let out = m.forward(&mut tape, &p, s).unwrap();
            tape.value(out.logits).clone()
        };
        let (x, y) = (run(&s1), run(&s2));
        // user block occupies 0..4, the first item 4..10, the second starts at 10
        let prefix = 10;
        assert_eq!(x.slice(ndarray::s![..prefix, ..]), y.slice(ndarray::s![..prefix, ..]));
        assert_ne!(x.row(prefix), y.row(prefix));
    }

    #[test]
    fn label_loss_gradients_match_finite_differences() {
        let m = model(4, 1, 7);
        let mut seq = HybridSequence::default();
        seq.push(Z_START);
        seq.push(ANS);
        seq.push(SPECIAL + 1);
        let report = gradcheck::check_params(&m.params, gradcheck::DEFAULT_STEP, None, |tape, p| {
            let out = m.forward(tape, p, &seq).unwrap();
            let rows = tape.gather_rows(out.logits, &[1, 2]);
            llm_loss(tape, rows, &[SPECIAL + 1, SPECIAL + 2 + 2])
        });
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn llm_loss_values() {
        let mut tape = Tape::new();
        let uniform = tape.leaf(Array2::zeros((1, 10)));
        let l = llm_loss(&mut tape, uniform, &[3]);
        assert!((tape.scalar(l) - std::f64::consts::LN_10).abs() < 1e-6);
        let sharp = tape.leaf(array![[60.0, 0.0, 0.0], [0.0, 0.0, 60.0]]);
        let l = llm_loss(&mut tape, sharp, &[0, 2]);
        assert!(tape.scalar(l) < 1e-20);
    }

    #[test]
    fn pooling_and_condition_sensitivity() {
        let mut tape = Tape::new();
        let h = tape.leaf(array![[1.0, 2.0], [3.0, 4.0], [9.0, 9.0]]);
        let pooled = Backbone::pool(&mut tape, h, &[0, 1]).unwrap();
        assert_eq!(tape.value(pooled), &array![[2.0, 3.0]]);
        let single = Backbone::pool(&mut tape, h, &[2]).unwrap();
        assert_eq!(tape.value(single), &array![[9.0, 9.0]]);
        assert!(Backbone::pool(&mut tape, h, &[]).is_err());

        let m = model(8, 1, 8);
        let base = standard_normal(&mut seeded(9, 0), 1, 8);
        let cond = |x: &Array2<f64>| {
            let mut tape = Tape::new();
            let p = m.params.bind(&mut tape);
            let v = tape.leaf(x.clone());
            let c = m.aggregate_condition(&mut tape, &p, v);
            tape.value(c).clone()
        };
        let mut bumped = base.clone();
        bumped[[0, 3]] += 0.1;
        assert_ne!(cond(&base), cond(&bumped));
    }

    #[test]
    fn argmax_ties_prefer_lower_ids() {
        let row = array![0.0, 5.0, 5.0, 1.0];
        assert_eq!(argmax_in(row.view(), 0..4), 1);
        assert_eq!(argmax_in(row.view(), 2..4), 2);
    }

    #[test]
    fn learns_separable_categories() {
        let mut cfg = BackboneConfig::new(layout(2), 3, 4);
        cfg.width = 16;
        cfg.layers = 1;
        let mut m = Backbone::new(cfg, labels(2, 3), 10).unwrap();
        let l = m.layout().clone();
        let mut rng = seeded(11, 0);
        let mut make = |n: usize| -> Vec<(HybridSequence, usize, usize)> {
            (0..n)
                .map(|i| {
                    let cat = i % 2;
                    let sign = if cat == 0 { 1.0 } else { -1.0 };
                    let user = standard_normal(&mut rng, 2, 3) * 0.3;
                    let toks: Vec<Array2<f64>> = (0..3).map(|_| standard_normal(&mut rng, 2, 3) * 0.3 + sign).collect();
                    let blocks: Vec<ItemBlock> = toks.iter().map(|t| ItemBlock { tokens: t.view(), category: cat, brand: cat }).collect();
                    (l.query(user.view(), &blocks).unwrap(), cat, cat)
                })
                .collect()
        };
        let train = make(64);
        let test = make(40);
        let mut opt = AdamW::new(&m.params, 3e-3, 0.0);
        for step in 0..200 {
            let batch: Vec<_> = (0..8).map(|j| &train[(step * 8 + j) % train.len()]).collect();
            let seqs: Vec<HybridSequence> = batch
                .iter()
                .map(|(q, c, _)| {
                    let mut s = q.clone();
                    s.push(l.category_token(*c).unwrap());
                    s
                })
                .collect();
            let brands: Vec<usize> = batch.iter().map(|b| b.2).collect();
            let mut tape = Tape::new();
            let p = m.params.bind(&mut tape);
            let (loss, _) = m.train_forward(&mut tape, &p, &seqs, &brands).unwrap();
            let grads = m.params.grads(&p, &tape.backward(loss));
            opt.step(&mut m.params, &grads);
        }
        let correct = test.iter().filter(|(q, c, _)| m.predict_semantics(q).unwrap().category == *c).count();
        assert!(correct as f64 >= 0.95 * test.len() as f64, "{correct}/{}", test.len());
        let first = m.predict_semantics(&test[0].0).unwrap();
        assert_eq!(first, m.predict_semantics(&test[0].0).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(8, 2, 12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.json");
        m.save(&path).unwrap();
        assert_eq!(Backbone::load(&path).unwrap(), m);
    }
}
