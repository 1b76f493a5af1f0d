//! `diffrec` command-line driver.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use diffrec_core::config::RunConfig;
use diffrec_core::data::{write_catalog, write_interactions, Split};
use diffrec_core::retrieval::{write_metrics, write_rankings, MetricRecord};
use diffrec_core::train::{self, Context, Recommender, TokenizerPair, TrainLog, BENCH_METHODS};
use diffrec_core::{synth, Error};

#[derive(Parser)]
#[command(name = "diffrec", version, about = "Continuous-token generative recommender")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set output_dir=DIR`.
    #[arg(long, global = true)]
    output_dir: Option<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic interaction log and catalog as TSV files.
    Synth,
    /// Split the data, build base embeddings and write a summary.
    Ingest,
    /// Train the user and item tokenizers.
    TrainTokenizer,
    /// Train backbone and recommendation head with frozen tokenizers.
    TrainRec,
    /// Evaluate trained checkpoints over the configured inference seeds.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: Split,
        /// Also write the first seed's rankings.
        #[arg(long)]
        rankings: bool,
    },
    /// Train every reconstruction method under one step budget.
    ReconstructBench {
        /// Number of data seeds, starting at the config seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.conf"), cfg.render())?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_log(log: &TrainLog, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    log.write_tsv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn synth_cmd(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let (rows, catalog) = synth::interactions(&cfg.synth(), cfg.synth_seed)?;
    write_interactions(&dir.join("interactions.tsv"), &rows)?;
    write_catalog(&dir.join("catalog.tsv"), &catalog)?;
    println!("wrote {} interactions over {} items to {}", rows.len(), catalog.len(), dir.display());
    Ok(())
}

fn ingest(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let prepared = train::prepare(cfg)?;
    let s = &prepared.split;
    let mut w = create(&dir.join("ingest.tsv"))?;
    writeln!(w, "key\tvalue")?;
    let rows: [(&str, String); 12] = [
        ("users", s.num_users().to_string()),
        ("items", s.num_items().to_string()),
        ("categories", s.labels.categories.len().to_string()),
        ("brands", s.labels.brands.len().to_string()),
        ("train_cut", s.train_cut.to_string()),
        ("valid_cut", s.valid_cut.to_string()),
        ("train_examples", s.train.len().to_string()),
        ("valid_examples", s.valid.len().to_string()),
        ("test_examples", s.test.len().to_string()),
        ("dropped_unseen_target", (s.dropped_valid.unseen_target + s.dropped_test.unseen_target).to_string()),
        ("dropped_short_history", (s.dropped_valid.short_history + s.dropped_test.short_history).to_string()),
        ("embedding_dim", prepared.dim().to_string()),
    ];
    for (k, v) in &rows {
        writeln!(w, "{k}\t{v}")?;
        println!("{k}\t{v}");
    }
    w.flush()?;
    let mut e = create(&dir.join("item-embeddings.tsv"))?;
    for (j, row) in prepared.base.item_vectors.rows().into_iter().enumerate() {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(e, "{}\t{}", s.item_ids[j], vals.join(","))?;
    }
    e.flush()?;
    Ok(())
}

fn train_tokenizer(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let prepared = train::prepare(cfg)?;
    let mut pair = TokenizerPair::new(cfg, prepared.dim())?;
    let mut log = TrainLog::new(cfg.hash());
    let outcome = train::train_tokenizers(cfg, &prepared, &mut pair, &mut log);
    pair.save(&dir)?;
    log.note_checkpoint("tokenizer-user", &dir.join(train::USER_TOKENIZER_FILE));
    log.note_checkpoint("tokenizer-item", &dir.join(train::ITEM_TOKENIZER_FILE));
    write_log(&log, &dir.join("tokenizer-log.tsv"))?;
    if let Err(e) = outcome {
        return Err(anyhow::Error::new(e).context("tokenizer training aborted; last-good checkpoints were written"));
    }
    if let Some(last) = log.records().last() {
        println!("tokenizers trained: {} steps, last loss {}", log.records().len(), last.total);
    }
    Ok(())
}

fn context(cfg: &RunConfig, dir: &Path) -> Result<Context> {
    let prepared = train::prepare(cfg)?;
    let pair = TokenizerPair::load(dir)?;
    if pair.item.config.input_dim != prepared.dim() {
        return Err(Error::Checkpoint(format!(
            "tokenizer width {} does not match embedding width {}",
            pair.item.config.input_dim,
            prepared.dim()
        ))
        .into());
    }
    Ok(Context::new(prepared, &pair)?)
}

fn train_rec(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let ctx = context(cfg, &dir)?;
    let mut rec = Recommender::new(cfg, ctx.split(), ctx.prepared.dim(), cfg.seed)?;
    let mut log = TrainLog::new(cfg.hash());
    let outcome = train::train_recommender(cfg, &ctx, &mut rec, &mut log);
    rec.save(&dir)?;
    log.note_checkpoint("backbone", &dir.join(train::BACKBONE_FILE));
    log.note_checkpoint("head", &dir.join(train::HEAD_FILE));
    write_log(&log, &dir.join("train-log.tsv"))?;
    let sel = outcome.map_err(|e| anyhow::Error::new(e).context("recommender training aborted; last-good checkpoints were written"))?;
    match (sel.best_epoch, sel.best_valid_hr10) {
        (Some(e), Some(hr)) => println!("trained {} steps; selected epoch {e} (validation HR@10 {hr:.4})", sel.steps),
        _ => println!("trained {} steps", sel.steps),
    }
    Ok(())
}

fn evaluate(cfg: &RunConfig, split: Split, rankings: bool) -> Result<()> {
    let dir = out_dir(cfg)?;
    let ctx = context(cfg, &dir)?;
    let rec = Recommender::load(&dir, cfg.head)?;
    let ev = train::evaluate(cfg, &ctx, &rec, split)?;
    let base = train::baselines(&ctx, split)?;
    let name = split.to_string();
    let mut records = Vec::new();
    for (seed, report) in ev.seeds.iter().zip(&ev.reports) {
        records.extend(MetricRecord::from_report(report, &cfg.dataset, &name, &seed.to_string()));
    }
    let s = &ev.summary;
    for (i, &k) in s.cutoffs.iter().enumerate() {
        for (metric, mean, std) in [("HR", s.hr_mean[i], s.hr_std[i]), ("NDCG", s.ndcg_mean[i], s.ndcg_std[i])] {
            for (tag, value) in [("mean", mean), ("std", std)] {
                records.push(MetricRecord { dataset: cfg.dataset.clone(), split: name.clone(), metric: metric.into(), k, value, seed: tag.into() });
            }
        }
    }
    for r in MetricRecord::from_report(&base.popularity, &cfg.dataset, &name, "-") {
        records.push(MetricRecord { metric: format!("popularity-{}", r.metric), ..r });
    }
    records.push(MetricRecord { dataset: cfg.dataset.clone(), split: name.clone(), metric: "random-HR".into(), k: 10, value: base.random_hr10, seed: "-".into() });
    let mut w = create(&dir.join(format!("metrics-{name}.tsv")))?;
    write_metrics(&mut w, &records)?;
    w.flush()?;
    if rankings {
        let mut w = create(&dir.join(format!("rankings-{name}.tsv")))?;
        write_rankings(&mut w, &ev.rankings, &ctx.split().user_ids, &ctx.split().item_ids)?;
        w.flush()?;
    }
    for k in &s.cutoffs {
        let (h, hs) = s.hr(*k);
        let (n, ns) = s.ndcg(*k);
        println!("{name} HR@{k} = {h:.4} ± {hs:.4}   NDCG@{k} = {n:.4} ± {ns:.4}");
    }
    println!("popularity HR@10 = {:.4}; random HR@10 = {:.4} over {} candidates", base.popularity.hr(10), base.random_hr10, base.candidates);
    Ok(())
}

fn bench(cfg: &RunConfig, seeds: u64) -> Result<()> {
    let dir = out_dir(cfg)?;
    let mut results = Vec::new();
    for r in 0..seeds {
        let seed = cfg.seed.wrapping_add(r);
        let res = train::reconstruct_bench(cfg, seed, &BENCH_METHODS)?;
        for c in &res.curves {
            println!("seed {seed}\t{}\tfinal MSE {:.6}", c.method, c.final_mse());
        }
        results.push(res);
    }
    let mut w = create(&dir.join("curves.tsv"))?;
    train::write_curves(&mut w, &results)?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    info!("config hash {}", cfg.hash());
    match cli.command {
        Command::Synth => synth_cmd(&cfg),
        Command::Ingest => ingest(&cfg),
        Command::TrainTokenizer => train_tokenizer(&cfg),
        Command::TrainRec => train_rec(&cfg),
        Command::Evaluate { split, rankings } => evaluate(&cfg, split, rankings),
        Command::ReconstructBench { seeds } => bench(&cfg, seeds),
        Command::ShowConfig => {
            print!("{}", cfg.render());
            println!("# hash {}", cfg.hash());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
