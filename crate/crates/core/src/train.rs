//! Training phases, evaluation and the reconstruction benchmark.
//!
//! Phase one fits a user and an item σ-VAE on the base embeddings. Phase two
//! freezes them and jointly trains the backbone and the recommendation head
//! on `L_llm + γ1 (L_diff + γ2 L_disp)`.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, HybridSequence, ItemBlock, Layout, Semantics};
use crate::checkpoint;
use crate::config::{HeadKind, RunConfig};
use crate::data::{
    build_base_embeddings, load_dataset, split_by_timepoint, EmbeddingBase, Example, ExternalEmbeddings,
    InteractionDataset, Split, SplitDataset,
};
use crate::diffusion::{DiffusionConfig, DiffusionHead, DiffusionReconstructor};
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamW, Bound, Mlp, Params};
use crate::quantized::{PlainVae, QuantizedAutoencoder, QuantizerConfig, Reconstructor};
use crate::retrieval::{
    compute_metrics, popularity_rankings, random_hit_rate, ItemIndex, MetricReport, ScoredRanking, SeedSummary, CUTOFFS,
};
use crate::rng::{seeded, streams, StreamRng};
use crate::synth;
use crate::tokenizer::{SigmaVae, TokenizerConfig};

/// Users sampled per guided-sampling call.
pub const SAMPLE_CHUNK: usize = 64;
/// Rows per reconstruction call in the benchmark.
const BENCH_CHUNK: usize = 256;
const USER_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub const USER_TOKENIZER_FILE: &str = "tokenizer-user.json";
pub const ITEM_TOKENIZER_FILE: &str = "tokenizer-item.json";
pub const BACKBONE_FILE: &str = "backbone.json";
pub const HEAD_FILE: &str = "head.json";

// ---------------------------------------------------------------------------
// Logging

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    pub l_vae: Option<f64>,
    pub l_llm: Option<f64>,
    pub l_diff: Option<f64>,
    pub l_disp: Option<f64>,
    pub total: f64,
    pub wall_ms: f64,
    pub config_hash: String,
}

impl LogRecord {
    /// Everything except the wall time.
    pub fn losses(&self) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>, f64) {
        (self.l_vae, self.l_llm, self.l_diff, self.l_disp, self.total)
    }
}

fn opt_field(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3}\t{}",
            self.phase,
            self.epoch,
            self.step,
            opt_field(self.l_vae),
            opt_field(self.l_llm),
            opt_field(self.l_diff),
            opt_field(self.l_disp),
            self.total,
            self.wall_ms,
            self.config_hash
        )
    }
}

/// Append-only step log. Every record carries the config hash.
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub config_hash: String,
    records: Vec<LogRecord>,
    checkpoints: Vec<(String, PathBuf)>,
    start: Instant,
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLoss {
    pub vae: Option<f64>,
    pub llm: Option<f64>,
    pub diff: Option<f64>,
    pub disp: Option<f64>,
    pub total: f64,
}

impl TrainLog {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self { config_hash: config_hash.into(), records: Vec::new(), checkpoints: Vec::new(), start: Instant::now() }
    }

    pub fn push(&mut self, phase: &str, epoch: usize, step: usize, loss: StepLoss) {
        self.records.push(LogRecord {
            phase: phase.into(),
            epoch,
            step,
            l_vae: loss.vae,
            l_llm: loss.llm,
            l_diff: loss.diff,
            l_disp: loss.disp,
            total: loss.total,
            wall_ms: self.start.elapsed().as_secs_f64() * 1e3,
            config_hash: self.config_hash.clone(),
        });
    }

    pub fn note_checkpoint(&mut self, name: &str, path: &Path) {
        self.checkpoints.push((name.into(), path.to_path_buf()));
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn checkpoints(&self) -> &[(String, PathBuf)] {
        &self.checkpoints
    }

    pub fn phase(&self, phase: &str) -> Vec<&LogRecord> {
        self.records.iter().filter(|r| r.phase == phase).collect()
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "phase\tepoch\tstep\tl_vae\tl_llm\tl_diff\tl_disp\ttotal\twall_ms\tconfig_hash")?;
        for r in &self.records {
            writeln!(w, "{r}")?;
        }
        for (name, path) in &self.checkpoints {
            writeln!(w, "# checkpoint\t{name}\t{}", path.display())?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Data

/// Split interactions plus their base embeddings.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: SplitDataset,
    pub base: EmbeddingBase,
}

impl Prepared {
    pub fn dim(&self) -> usize {
        self.base.dim()
    }
}

pub fn load_interactions(cfg: &RunConfig) -> Result<InteractionDataset> {
    if cfg.uses_synthetic_data() {
        let (rows, catalog) = synth::interactions(&cfg.synth(), cfg.synth_seed)?;
        InteractionDataset::from_records(rows, catalog)
    } else {
        load_dataset(Path::new(&cfg.interactions), Path::new(&cfg.catalog))
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let ds = load_interactions(cfg)?;
    let split = split_by_timepoint(&ds, cfg.train_quantile, cfg.valid_quantile, cfg.max_history)?;
    let external = if cfg.external_embeddings.is_empty() {
        None
    } else {
        Some(ExternalEmbeddings::load(Path::new(&cfg.external_embeddings))?)
    };
    let base = build_base_embeddings(&split, cfg.embed_dim, external.as_ref().map(|e| (e, cfg.external_mode)))?;
    info!(
        "prepared {} users, {} items; {} train / {} valid / {} test examples",
        split.num_users(),
        split.num_items(),
        split.train.len(),
        split.valid.len(),
        split.test.len()
    );
    Ok(Prepared { split, base })
}

/// Rows rescaled to Euclidean norm `norm`; zero rows stay zero.
pub fn rescale_rows(x: &Array2<f64>, norm: f64) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row *= norm / n;
        }
    }
    out
}

fn nonzero_rows(x: &Array2<f64>) -> Array2<f64> {
    let keep: Vec<usize> = (0..x.nrows()).filter(|&i| x.row(i).iter().any(|v| *v != 0.0)).collect();
    x.select(Axis(0), &keep)
}

// ---------------------------------------------------------------------------
// Phase one: tokenizers

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerPair {
    pub user: SigmaVae,
    pub item: SigmaVae,
}

impl TokenizerPair {
    pub fn new(cfg: &RunConfig, dim: usize) -> Result<Self> {
        let mut tc = TokenizerConfig::new(dim, cfg.num_tokens, cfg.token_dim);
        tc.hidden = cfg.tokenizer_hidden;
        tc.mask_ratio = cfg.mask_ratio;
        tc.beta = cfg.vae_beta;
        tc.gamma_floor = cfg.gamma_floor;
        tc.activation = cfg.activation;
        Ok(Self { user: SigmaVae::new(tc.clone(), cfg.seed ^ USER_SEED_SALT)?, item: SigmaVae::new(tc, cfg.seed)? })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(&dir.join(USER_TOKENIZER_FILE), SigmaVae::CHECKPOINT_KIND, &self.user)?;
        checkpoint::save(&dir.join(ITEM_TOKENIZER_FILE), SigmaVae::CHECKPOINT_KIND, &self.item)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            user: checkpoint::load(&dir.join(USER_TOKENIZER_FILE), SigmaVae::CHECKPOINT_KIND)?,
            item: checkpoint::load(&dir.join(ITEM_TOKENIZER_FILE), SigmaVae::CHECKPOINT_KIND)?,
        })
    }
}

fn fit_tokenizer(
    cfg: &RunConfig,
    model: &mut SigmaVae,
    data: &Array2<f64>,
    rng: &mut StreamRng,
    phase: &str,
    log: &mut TrainLog,
) -> Result<()> {
    if data.nrows() == 0 {
        return Err(Error::EmptyInput(format!("{phase}: no non-zero embeddings")));
    }
    let mut opt = AdamW::new(&model.params, cfg.tokenizer_lr, cfg.tokenizer_weight_decay);
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.tokenizer_epochs {
        let last_good = model.clone();
        order.shuffle(rng);
        for idx in order.chunks(cfg.tokenizer_batch) {
            let batch = data.select(Axis(0), idx);
            let loss = match model.train_step(&mut opt, &batch, rng) {
                Ok(l) if model.params.all_finite() => l,
                Ok(l) => Err(Error::Diverged(format!("{phase}: non-finite parameters after loss {l}")))?,
                Err(e) => {
                    *model = last_good;
                    warn!("{phase} diverged at epoch {epoch}; restored the end of epoch {}", epoch - 1);
                    return Err(e);
                }
            };
            step += 1;
            log.push(phase, epoch, step, StepLoss { vae: Some(loss), total: loss, ..StepLoss::default() });
        }
    }
    Ok(())
}

/// Fit both tokenizers on base embeddings rescaled to norm `√D`.
/// On divergence the affected model is restored to its last completed epoch.
pub fn train_tokenizers(cfg: &RunConfig, prepared: &Prepared, pair: &mut TokenizerPair, log: &mut TrainLog) -> Result<()> {
    let norm = (prepared.dim() as f64).sqrt();
    let items = nonzero_rows(&rescale_rows(&prepared.base.item_vectors, norm));
    let users = nonzero_rows(&rescale_rows(&prepared.base.user_vectors, norm));
    let mut rng = seeded(cfg.seed, streams::TOKENIZER_TRAIN);
    fit_tokenizer(cfg, &mut pair.item, &items, &mut rng, "tokenizer-item", log)?;
    fit_tokenizer(cfg, &mut pair.user, &users, &mut rng, "tokenizer-user", log)
}

/// Mean reconstruction MSE per entry of a tokenizer on `x`.
pub fn reconstruction_mse(model: &dyn Reconstructor, x: &Array2<f64>) -> Result<f64> {
    let mut total = 0.0;
    for start in (0..x.nrows()).step_by(BENCH_CHUNK) {
        let chunk = x.slice(ndarray::s![start..(start + BENCH_CHUNK).min(x.nrows()), ..]).to_owned();
        let r = model.reconstruct(&chunk)?;
        total += (&r - &chunk).mapv(|v| v * v).sum();
    }
    Ok(total / x.len() as f64)
}

// ---------------------------------------------------------------------------
// Phase two: recommender

/// Inference tokens of every user and item under frozen tokenizers.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCache {
    pub users: Vec<Array2<f64>>,
    pub items: Vec<Array2<f64>>,
}

impl TokenCache {
    pub fn build(pair: &TokenizerPair, base: &EmbeddingBase) -> Result<Self> {
        let norm = (base.dim() as f64).sqrt();
        let tok = |model: &SigmaVae, x: &Array2<f64>| -> Result<Vec<Array2<f64>>> {
            Ok(model.tokenize_batch(&rescale_rows(x, norm))?.iter().map(|t| t.token_matrix()).collect())
        };
        Ok(Self { users: tok(&pair.user, &base.user_vectors)?, items: tok(&pair.item, &base.item_vectors)? })
    }
}

/// Everything the recommender phase reads but never updates.
pub struct Context {
    pub prepared: Prepared,
    pub tokens: TokenCache,
    /// Diffusion targets: item base vectors at norm `√d`.
    pub targets: Array2<f64>,
    pub index: ItemIndex,
}

impl Context {
    pub fn new(prepared: Prepared, tokenizers: &TokenizerPair) -> Result<Self> {
        let tokens = TokenCache::build(tokenizers, &prepared.base)?;
        let targets = rescale_rows(&prepared.base.item_vectors, (prepared.dim() as f64).sqrt());
        let split = &prepared.split;
        let index = ItemIndex::new(&prepared.base.item_vectors, split.item_category.clone(), split.item_brand.clone());
        Ok(Self { prepared, tokens, targets, index })
    }

    pub fn split(&self) -> &SplitDataset {
        &self.prepared.split
    }

    fn blocks(&self, history: &[usize]) -> Vec<ItemBlock<'_>> {
        let split = self.split();
        history
            .iter()
            .map(|&j| ItemBlock { tokens: self.tokens.items[j].view(), category: split.item_category[j], brand: split.item_brand[j] })
            .collect()
    }

    pub fn query(&self, layout: &Layout, ex: &Example) -> Result<HybridSequence> {
        layout.query(self.tokens.users[ex.user].view(), &self.blocks(&ex.history))
    }

    pub fn training_sequence(&self, layout: &Layout, ex: &Example) -> Result<HybridSequence> {
        let category = self.split().item_category[ex.target];
        layout.training_sequence(self.tokens.users[ex.user].view(), &self.blocks(&ex.history), category)
    }

    /// Candidates excluded for `ex`: its (capped) history.
    pub fn exclusions(ex: &Example) -> BTreeSet<usize> {
        ex.history.iter().copied().collect()
    }
}

/// Direct regression from the condition to the target embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub params: Params,
    pub mlp: Mlp,
}

impl ProjectionHead {
    pub const KIND: &'static str = "projection-head";

    pub fn new(cond_dim: usize, item_dim: usize, hidden: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = seeded(seed, streams::INIT);
        let mut params = Params::new();
        let mlp = Mlp::new(&mut params, &mut rng, "projection", &[cond_dim, hidden, item_dim], activation);
        Self { params, mlp }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, c: Var) -> Var {
        self.mlp.forward(tape, p, c)
    }

    pub fn predict(&self, c: &Array2<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let cv = tape.leaf(c.clone());
        let out = self.forward(&mut tape, &p, cv);
        tape.value(out).clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum RecHead {
    Diffusion(DiffusionHead),
    Projection(ProjectionHead),
}

impl RecHead {
    pub fn params(&self) -> &Params {
        match self {
            Self::Diffusion(h) => &h.params,
            Self::Projection(h) => &h.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut Params {
        match self {
            Self::Diffusion(h) => &mut h.params,
            Self::Projection(h) => &mut h.params,
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Self::Diffusion(_) => HeadKind::Diffusion,
            Self::Projection(_) => HeadKind::Projection,
        }
    }
}

/// Backbone plus recommendation head.
#[derive(Debug, Clone, PartialEq)]
pub struct Recommender {
    pub backbone: Backbone,
    pub head: RecHead,
}

/// Loss terms of one joint step.
#[derive(Debug, Clone, Copy)]
pub struct JointTerms {
    pub llm: Var,
    pub diff: Var,
    pub disp: Option<Var>,
    pub total: Var,
}

impl Recommender {
    pub fn new(cfg: &RunConfig, split: &SplitDataset, item_dim: usize, seed: u64) -> Result<Self> {
        let layout = Layout {
            num_categories: split.labels.categories.len(),
            num_brands: split.labels.brands.len(),
            num_tokens: cfg.num_tokens,
            max_items: cfg.max_history,
        };
        let mut bc = BackboneConfig::new(layout, cfg.token_dim, cfg.cond_dim);
        bc.width = cfg.backbone_width;
        bc.heads = cfg.backbone_heads;
        bc.layers = cfg.backbone_layers;
        bc.activation = cfg.activation;
        let backbone = Backbone::new(bc, split.labels.clone(), seed)?;
        let head = match cfg.head {
            HeadKind::Diffusion => {
                let mut dc = DiffusionConfig::new(item_dim, cfg.cond_dim);
                dc.hidden = cfg.diffusion_hidden;
                dc.heads = cfg.diffusion_heads;
                dc.steps = cfg.diffusion_steps;
                dc.beta_start = cfg.beta_start;
                dc.beta_end = cfg.beta_end;
                dc.inference_steps = cfg.inference_steps;
                dc.uncond_prob = cfg.uncond_prob;
                dc.temperature = cfg.temperature;
                dc.repeats = cfg.diffusion_repeats;
                dc.activation = cfg.activation;
                RecHead::Diffusion(DiffusionHead::new(dc, seed)?)
            }
            HeadKind::Projection => {
                RecHead::Projection(ProjectionHead::new(cfg.cond_dim, item_dim, cfg.diffusion_hidden, cfg.activation, seed))
            }
        };
        Ok(Self { backbone, head })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.backbone.save(&dir.join(BACKBONE_FILE))?;
        let path = dir.join(HEAD_FILE);
        match &self.head {
            RecHead::Diffusion(h) => h.save(&path),
            RecHead::Projection(h) => checkpoint::save(&path, ProjectionHead::KIND, h),
        }
    }

    pub fn load(dir: &Path, kind: HeadKind) -> Result<Self> {
        let backbone = Backbone::load(&dir.join(BACKBONE_FILE))?;
        let path = dir.join(HEAD_FILE);
        let head = match kind {
            HeadKind::Diffusion => RecHead::Diffusion(DiffusionHead::load(&path)?),
            HeadKind::Projection => RecHead::Projection(checkpoint::load(&path, ProjectionHead::KIND)?),
        };
        Ok(Self { backbone, head })
    }

    /// Joint objective on one batch.
    #[allow(clippy::too_many_arguments)]
    pub fn joint_terms(
        &self,
        tape: &mut Tape,
        pb: &Bound,
        ph: &Bound,
        seqs: &[HybridSequence],
        brands: &[usize],
        y0: &Array2<f64>,
        gamma1: f64,
        gamma2: f64,
        rng: &mut StreamRng,
    ) -> Result<JointTerms> {
        let (llm, cond) = self.backbone.train_forward(tape, pb, seqs, brands)?;
        let (diff, disp, inner) = match &self.head {
            RecHead::Diffusion(head) => {
                let terms = head.losses(tape, ph, cond, y0, rng)?;
                let weighted = tape.scale(terms.dispersive, gamma2);
                let inner = tape.add(terms.diffusion, weighted);
                (terms.diffusion, Some(terms.dispersive), inner)
            }
            RecHead::Projection(head) => {
                let y_hat = head.forward(tape, ph, cond);
                let target = tape.leaf(y0.clone());
                let mse = crate::diffusion::diffusion_loss(tape, y_hat, target);
                (mse, None, mse)
            }
        };
        let weighted = tape.scale(inner, gamma1);
        let total = tape.add(llm, weighted);
        Ok(JointTerms { llm, diff, disp, total })
    }

    /// Labels and conditions for each example.
    pub fn semantics(&self, ctx: &Context, examples: &[Example]) -> Result<Vec<Semantics>> {
        examples.iter().map(|ex| self.backbone.predict_semantics(&ctx.query(self.backbone.layout(), ex)?)).collect()
    }

    /// Preference vectors for stacked conditions. Diffusion sampling uses
    /// stream `INFERENCE_BASE + user` of `seed` for each row.
    pub fn generate(&self, cond: &Array2<f64>, users: &[usize], omega: f64, seed: u64) -> Result<Array2<f64>> {
        match &self.head {
            RecHead::Projection(h) => Ok(h.predict(cond)),
            RecHead::Diffusion(h) => {
                let mut out = Array2::zeros((cond.nrows(), h.config.item_dim));
                for start in (0..cond.nrows()).step_by(SAMPLE_CHUNK) {
                    let end = (start + SAMPLE_CHUNK).min(cond.nrows());
                    let mut rngs: Vec<StreamRng> =
                        users[start..end].iter().map(|&u| seeded(seed, streams::INFERENCE_BASE + u as u64)).collect();
                    let c = cond.slice(ndarray::s![start..end, ..]).to_owned();
                    let y = h.sample(&c, omega, &mut rngs)?;
                    out.slice_mut(ndarray::s![start..end, ..]).assign(&y);
                }
                Ok(out)
            }
        }
    }
}

fn stack_rows(rows: &[Array1<f64>], width: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    out
}

/// Outcome of the recommender phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub steps: usize,
    /// Epoch of the selected snapshot, if validation ran.
    pub best_epoch: Option<usize>,
    pub best_valid_hr10: Option<f64>,
}

/// Train backbone and head jointly with the tokenizers frozen. When
/// validation runs, `rec` ends at the snapshot with the best validation
/// HR@10; on divergence it is restored to its last completed epoch.
pub fn train_recommender(cfg: &RunConfig, ctx: &Context, rec: &mut Recommender, log: &mut TrainLog) -> Result<Selection> {
    let split = ctx.split();
    if split.train.is_empty() {
        return Err(Error::EmptyInput("no training examples".into()));
    }
    let mut opt_b = AdamW::new(&rec.backbone.params, cfg.backbone_lr, cfg.backbone_weight_decay);
    let mut opt_h = AdamW::new(rec.head.params(), cfg.backbone_lr, cfg.backbone_weight_decay);
    let mut rng = seeded(cfg.seed, streams::RECOMMENDER_TRAIN);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut best: Option<(f64, usize, Recommender)> = None;
    let mut step = 0;
    let limit = if cfg.max_steps == 0 { usize::MAX } else { cfg.max_steps };
    let validate = cfg.eval_every > 0 && !split.valid.is_empty();

    'epochs: for epoch in 1..=cfg.epochs {
        let last_good = rec.clone();
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            if step >= limit {
                break 'epochs;
            }
            let batch: Vec<&Example> = idx.iter().map(|&i| &split.train[i]).collect();
            let layout = rec.backbone.layout().clone();
            let seqs = batch.iter().map(|ex| ctx.training_sequence(&layout, ex)).collect::<Result<Vec<_>>>()?;
            let brands: Vec<usize> = batch.iter().map(|ex| split.item_brand[ex.target]).collect();
            let targets: Vec<usize> = batch.iter().map(|ex| ex.target).collect();
            let y0 = ctx.targets.select(Axis(0), &targets);

            let mut tape = Tape::new();
            let pb = rec.backbone.params.bind(&mut tape);
            let ph = rec.head.params().bind(&mut tape);
            let terms = match rec.joint_terms(&mut tape, &pb, &ph, &seqs, &brands, &y0, cfg.gamma1, cfg.gamma2, &mut rng) {
                Ok(t) => t,
                Err(e @ Error::Numeric { .. }) => {
                    *rec = last_good;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let loss = StepLoss {
                vae: None,
                llm: Some(tape.scalar(terms.llm)),
                diff: Some(tape.scalar(terms.diff)),
                disp: terms.disp.map(|d| tape.scalar(d)),
                total: tape.scalar(terms.total),
            };
            if !loss.total.is_finite() {
                *rec = last_good;
                return Err(Error::Diverged(format!("recommender loss {} at step {}", loss.total, step + 1)));
            }
            let grads = tape.backward(terms.total);
            let gb = rec.backbone.params.grads(&pb, &grads);
            let gh = rec.head.params().grads(&ph, &grads);
            opt_b.step(&mut rec.backbone.params, &gb);
            opt_h.step(rec.head.params_mut(), &gh);
            step += 1;
            log.push("recommender", epoch, step, loss);
        }
        if validate && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            let report = evaluate_once(cfg, ctx, rec, Split::Valid, cfg.seed)?;
            let hr = report.hr(10);
            info!("epoch {epoch}: validation HR@10 = {hr:.4}");
            if best.as_ref().is_none_or(|(b, _, _)| hr > *b) {
                best = Some((hr, epoch, rec.clone()));
            }
        }
    }
    if validate && step < limit && best.is_none() {
        let report = evaluate_once(cfg, ctx, rec, Split::Valid, cfg.seed)?;
        best = Some((report.hr(10), cfg.epochs, rec.clone()));
    }
    Ok(match best {
        Some((hr, epoch, snapshot)) => {
            *rec = snapshot;
            Selection { steps: step, best_epoch: Some(epoch), best_valid_hr10: Some(hr) }
        }
        None => Selection { steps: step, best_epoch: None, best_valid_hr10: None },
    })
}

// ---------------------------------------------------------------------------
// Evaluation

/// One inference pass over a split; returns the report and the rankings.
pub fn rank_split(
    cfg: &RunConfig,
    ctx: &Context,
    rec: &Recommender,
    split: Split,
    seed: u64,
) -> Result<(MetricReport, Vec<ScoredRanking>)> {
    let examples = ctx.split().examples(split);
    if examples.is_empty() {
        return Err(Error::EmptyInput(format!("no {split} examples")));
    }
    let sem = rec.semantics(ctx, examples)?;
    let cond = stack_rows(&sem.iter().map(|s| s.condition.clone()).collect::<Vec<_>>(), rec.backbone.config.cond_dim);
    let users: Vec<usize> = examples.iter().map(|e| e.user).collect();
    let y = rec.generate(&cond, &users, cfg.omega, seed)?;
    let k = *CUTOFFS.iter().max().expect("cutoffs");
    let mut rankings = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let scores = ctx.index.scores(y.row(i), sem[i].category, sem[i].brand, cfg.pi, cfg.match_rule)?;
        rankings.push(ScoredRanking::from_scores(ex.user, &scores, k, &Context::exclusions(ex)));
    }
    let targets: Vec<(usize, usize)> = examples.iter().map(|e| (e.user, e.target)).collect();
    Ok((compute_metrics(&rankings, &targets, &CUTOFFS)?, rankings))
}

fn evaluate_once(cfg: &RunConfig, ctx: &Context, rec: &Recommender, split: Split, seed: u64) -> Result<MetricReport> {
    Ok(rank_split(cfg, ctx, rec, split, seed)?.0)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub seeds: Vec<u64>,
    pub reports: Vec<MetricReport>,
    pub summary: SeedSummary,
    /// Rankings of the first inference seed.
    pub rankings: Vec<ScoredRanking>,
}

/// `cfg.eval_seeds` inference repetitions with seeds `seed, seed+1, …`.
pub fn evaluate(cfg: &RunConfig, ctx: &Context, rec: &Recommender, split: Split) -> Result<Evaluation> {
    let seeds: Vec<u64> = (0..cfg.eval_seeds as u64).map(|r| cfg.seed.wrapping_add(r)).collect();
    let mut reports = Vec::with_capacity(seeds.len());
    let mut first = None;
    for &s in &seeds {
        let (report, rankings) = rank_split(cfg, ctx, rec, split, s)?;
        reports.push(report);
        first.get_or_insert(rankings);
    }
    let summary = SeedSummary::from_reports(&reports)?;
    Ok(Evaluation { seeds, reports, summary, rankings: first.unwrap_or_default() })
}

#[derive(Debug, Clone)]
pub struct Baselines {
    pub popularity: MetricReport,
    /// Analytic HR@10 of a uniformly random ranking.
    pub random_hr10: f64,
    pub candidates: usize,
}

pub fn baselines(ctx: &Context, split: Split) -> Result<Baselines> {
    let examples = ctx.split().examples(split);
    let users: Vec<(usize, BTreeSet<usize>)> = examples.iter().map(|e| (e.user, Context::exclusions(e))).collect();
    let k = *CUTOFFS.iter().max().expect("cutoffs");
    let rankings = popularity_rankings(&ctx.split().item_popularity(), &users, &ctx.index, k);
    let targets: Vec<(usize, usize)> = examples.iter().map(|e| (e.user, e.target)).collect();
    let m = ctx.index.num_valid();
    Ok(Baselines { popularity: compute_metrics(&rankings, &targets, &CUTOFFS)?, random_hr10: random_hit_rate(10, m), candidates: m })
}

// ---------------------------------------------------------------------------
// Full pipeline

/// Result of running both phases in memory.
pub struct Pipeline {
    pub tokenizers: TokenizerPair,
    pub context: Context,
    pub recommender: Recommender,
    pub selection: Selection,
    pub log: TrainLog,
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<Pipeline> {
    let prepared = prepare(cfg)?;
    let mut log = TrainLog::new(cfg.hash());
    let mut tokenizers = TokenizerPair::new(cfg, prepared.dim())?;
    train_tokenizers(cfg, &prepared, &mut tokenizers, &mut log)?;
    let dim = prepared.dim();
    let context = Context::new(prepared, &tokenizers)?;
    let mut recommender = Recommender::new(cfg, context.split(), dim, cfg.seed)?;
    let selection = train_recommender(cfg, &context, &mut recommender, &mut log)?;
    Ok(Pipeline { tokenizers, context, recommender, selection, log })
}

// ---------------------------------------------------------------------------
// Reconstruction benchmark

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCurve {
    pub method: String,
    pub steps: Vec<usize>,
    pub mse: Vec<f64>,
}

impl BenchCurve {
    pub fn final_mse(&self) -> f64 {
        *self.mse.last().expect("non-empty curve")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub seed: u64,
    pub curves: Vec<BenchCurve>,
}

impl BenchResult {
    pub fn final_mse(&self, method: &str) -> Option<f64> {
        self.curves.iter().find(|c| c.method == method).map(BenchCurve::final_mse)
    }
}

pub const BENCH_METHODS: [&str; 5] = ["vae", "vq-vae", "rq-vae", "sigma-vae", "diffusion"];

fn bench_model(cfg: &RunConfig, method: &str, seed: u64) -> Result<Box<dyn Reconstructor>> {
    let d = cfg.bench_dim;
    let code = cfg.bench_tokens * cfg.bench_token_dim;
    let quant = |depth: usize| -> Result<Box<dyn Reconstructor>> {
        let mut qc = QuantizerConfig::new(d, code);
        qc.hidden = cfg.bench_hidden;
        qc.codebook_size = cfg.bench_codebook;
        qc.depth = depth;
        qc.activation = cfg.activation;
        Ok(Box::new(QuantizedAutoencoder::new(qc, seed)?))
    };
    Ok(match method {
        "vae" => Box::new(PlainVae::new(d, code, cfg.bench_hidden, cfg.activation, seed)),
        "vq-vae" => quant(1)?,
        "rq-vae" => quant(cfg.bench_depth)?,
        "sigma-vae" => {
            let mut tc = TokenizerConfig::new(d, cfg.bench_tokens, cfg.bench_token_dim);
            tc.hidden = cfg.bench_hidden;
            tc.mask_ratio = cfg.mask_ratio;
            tc.beta = cfg.vae_beta;
            tc.gamma_floor = cfg.gamma_floor;
            tc.activation = cfg.activation;
            Box::new(SigmaVae::new(tc, seed)?)
        }
        "diffusion" => {
            Box::new(DiffusionReconstructor::new(d, cfg.bench_hidden, cfg.diffusion_steps, cfg.inference_steps, seed)?)
        }
        other => return Err(Error::Config(format!("unknown benchmark method '{other}'"))),
    })
}

/// Train every method for the same number of steps on one seeded
/// low-rank set and record reconstruction MSE per entry along the way.
pub fn reconstruct_bench(cfg: &RunConfig, seed: u64, methods: &[&str]) -> Result<BenchResult> {
    if cfg.bench_eval_every == 0 {
        return Err(Error::Config("bench_eval_every must be positive".into()));
    }
    let data = synth::low_rank_embeddings(cfg.bench_items, cfg.bench_dim, cfg.bench_rank, cfg.bench_noise, seed)?;
    let mut curves = Vec::new();
    for &method in methods {
        let mut model = bench_model(cfg, method, seed)?;
        let mut opt = AdamW::new(model.params(), cfg.bench_lr, 0.0);
        let mut rng = seeded(seed, streams::BENCH);
        let mut order: Vec<usize> = (0..data.nrows()).collect();
        let mut cursor = order.len();
        let mut curve = BenchCurve { method: method.into(), steps: vec![0], mse: vec![reconstruction_mse(model.as_ref(), &data)?] };
        for step in 1..=cfg.bench_steps {
            if cursor + cfg.bench_batch > order.len() {
                if cursor != order.len() || step > 1 {
                    model.end_epoch(&data, &mut rng);
                }
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let batch = data.select(Axis(0), &order[cursor..cursor + cfg.bench_batch.min(order.len())]);
            cursor += cfg.bench_batch;
            model.train_step(&mut opt, &batch, &mut rng)?;
            if step % cfg.bench_eval_every == 0 || step == cfg.bench_steps {
                curve.steps.push(step);
                curve.mse.push(reconstruction_mse(model.as_ref(), &data)?);
            }
        }
        info!("bench seed {seed}: {method} final MSE {:.5}", curve.final_mse());
        curves.push(curve);
    }
    Ok(BenchResult { seed, curves })
}

/// `seed \t method \t step \t mse` lines.
pub fn write_curves<W: Write>(mut w: W, results: &[BenchResult]) -> Result<()> {
    writeln!(w, "seed\tmethod\tstep\tmse")?;
    for r in results {
        for c in &r.curves {
            for (s, m) in c.steps.iter().zip(&c.mse) {
                writeln!(w, "{}\t{}\t{}\t{}", r.seed, c.method, s, m)?;
            }
        }
    }
    Ok(())
}
