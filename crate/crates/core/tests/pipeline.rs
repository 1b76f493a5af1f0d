use diffrec_core::config::{HeadKind, RunConfig};
use diffrec_core::data::{write_catalog, write_interactions, Split};
use diffrec_core::synth;
use diffrec_core::train;

const TOY: &[&str] = &[
    "synth_users=48",
    "synth_items=30",
    "synth_categories=2",
    "synth_min_len=8",
    "synth_max_len=12",
    "max_history=6",
    "embed_dim=8",
    "token_dim=4",
    "tokenizer_hidden=16",
    "tokenizer_epochs=3",
    "backbone_width=16",
    "backbone_layers=1",
    "cond_dim=8",
    "diffusion_hidden=16",
    "diffusion_steps=50",
    "inference_steps=5",
    "diffusion_repeats=1",
    "epochs=2",
    "eval_every=1",
    "eval_seeds=2",
];

fn toy() -> RunConfig {
    let mut cfg = RunConfig::default();
    for o in TOY {
        cfg.apply_override(o).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

#[test]
fn files_and_generator_give_the_same_split() {
    let cfg = toy();
    let (rows, catalog) = synth::interactions(&cfg.synth(), cfg.synth_seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (ip, cp) = (dir.path().join("i.tsv"), dir.path().join("c.tsv"));
    write_interactions(&ip, &rows).unwrap();
    write_catalog(&cp, &catalog).unwrap();

    let mut from_files = cfg.clone();
    from_files.interactions = ip.display().to_string();
    from_files.catalog = cp.display().to_string();
    from_files.validate().unwrap();
    let a = train::prepare(&cfg).unwrap();
    let b = train::prepare(&from_files).unwrap();
    assert_eq!(a.split.test.len(), b.split.test.len());
    assert_eq!(a.base.item_vectors, b.base.item_vectors);
}

#[test]
fn both_heads_train_and_evaluate() {
    for head in [HeadKind::Diffusion, HeadKind::Projection] {
        let mut cfg = toy();
        cfg.head = head;
        let p = train::run_pipeline(&cfg).unwrap();
        assert!(p.selection.best_epoch.is_some());
        let ev = train::evaluate(&cfg, &p.context, &p.recommender, Split::Valid).unwrap();
        assert_eq!(ev.reports.len(), 2);
        let (hr, std) = ev.summary.hr(20);
        assert!((0.0..=1.0).contains(&hr) && std >= 0.0);
        assert!(ev.summary.hr(10).0 <= hr);
        let base = train::baselines(&p.context, Split::Valid).unwrap();
        assert!((base.random_hr10 - 10.0 / base.candidates as f64).abs() < 1e-12);
    }
}
