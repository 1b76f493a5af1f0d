//! Interaction/catalog ingestion, chronological splitting and base embeddings.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::svd::{truncated_svd, SparseBinary};

pub const UNKNOWN_LABEL: &str = "unknown";
pub const DEFAULT_MAX_LEN: usize = 20;

/// A raw timestamped event with opaque ids.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub item_id: String,
    pub title: String,
    pub brand: String,
    pub category: String,
}

/// An event after id resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

/// Category and brand label sets, enumerated in sorted order at ingest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocab {
    pub categories: Vec<String>,
    pub brands: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionDataset {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// One entry per item index; placeholders for items missing from the catalog.
    pub catalog: Vec<CatalogEntry>,
    pub labels: LabelVocab,
    pub item_category: Vec<usize>,
    pub item_brand: Vec<usize>,
    /// Deduplicated and sorted by timestamp (stable w.r.t. input order).
    pub events: Vec<Event>,
}

impl InteractionDataset {
    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    /// Build from in-memory records; same rules as [`load_dataset`].
    pub fn from_records(interactions: Vec<Interaction>, catalog: Vec<CatalogEntry>) -> Result<Self> {
        if interactions.is_empty() {
            return Err(Error::EmptyInput("no interactions".into()));
        }
        let mut seen = BTreeSet::new();
        let mut unique: Vec<Interaction> = interactions.into_iter().filter(|i| seen.insert(i.clone())).collect();
        unique.sort_by_key(|i| i.timestamp);

        let mut item_index: BTreeMap<String, usize> = BTreeMap::new();
        let mut item_ids = Vec::new();
        let mut entries = Vec::new();
        for entry in catalog {
            if item_index.contains_key(&entry.item_id) {
                continue;
            }
            item_index.insert(entry.item_id.clone(), item_ids.len());
            item_ids.push(entry.item_id.clone());
            entries.push(entry);
        }

        let mut user_index: BTreeMap<String, usize> = BTreeMap::new();
        let mut user_ids = Vec::new();
        let mut events = Vec::with_capacity(unique.len());
        for it in &unique {
            let user = *user_index.entry(it.user_id.clone()).or_insert_with(|| {
                user_ids.push(it.user_id.clone());
                user_ids.len() - 1
            });
            let item = match item_index.get(&it.item_id) {
                Some(&j) => j,
                None => {
                    let j = item_ids.len();
                    item_index.insert(it.item_id.clone(), j);
                    item_ids.push(it.item_id.clone());
                    entries.push(CatalogEntry {
                        item_id: it.item_id.clone(),
                        title: UNKNOWN_LABEL.into(),
                        brand: UNKNOWN_LABEL.into(),
                        category: UNKNOWN_LABEL.into(),
                    });
                    j
                }
            };
            events.push(Event { user, item, timestamp: it.timestamp });
        }

        let categories: Vec<String> =
            entries.iter().map(|e| e.category.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let brands: Vec<String> = entries.iter().map(|e| e.brand.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let lookup = |v: &[String], s: &str| v.binary_search_by(|x| x.as_str().cmp(s)).expect("label enumerated");
        let item_category = entries.iter().map(|e| lookup(&categories, &e.category)).collect();
        let item_brand = entries.iter().map(|e| lookup(&brands, &e.brand)).collect();

        Ok(Self {
            user_ids,
            item_ids,
            catalog: entries,
            labels: LabelVocab { categories, brands },
            item_category,
            item_brand,
            events,
        })
    }
}

fn parse_lines<T>(path: &Path, fields: usize, mut f: impl FnMut(&[&str], usize) -> Result<T>) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != fields {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("expected {fields} tab-separated fields, found {}", cols.len()),
            });
        }
        out.push(f(&cols, i + 1)?);
    }
    Ok(out)
}

pub fn read_interactions(path: &Path) -> Result<Vec<Interaction>> {
    parse_lines(path, 3, |cols, line| {
        let timestamp = cols[2].trim().parse::<i64>().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line,
            message: format!("bad timestamp '{}': {e}", cols[2]),
        })?;
        Ok(Interaction { user_id: cols[0].to_string(), item_id: cols[1].to_string(), timestamp })
    })
}

pub fn read_catalog(path: &Path) -> Result<Vec<CatalogEntry>> {
    parse_lines(path, 4, |cols, _| {
        Ok(CatalogEntry {
            item_id: cols[0].to_string(),
            title: cols[1].to_string(),
            brand: cols[2].to_string(),
            category: cols[3].to_string(),
        })
    })
}

pub fn load_dataset(interactions_path: &Path, catalog_path: &Path) -> Result<InteractionDataset> {
    let interactions = read_interactions(interactions_path)?;
    let catalog = read_catalog(catalog_path)?;
    InteractionDataset::from_records(interactions, catalog)
}

pub fn write_interactions(path: &Path, rows: &[Interaction]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&format!("{}\t{}\t{}\n", r.user_id, r.item_id, r.timestamp));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn write_catalog(path: &Path, rows: &[CatalogEntry]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&format!("{}\t{}\t{}\t{}\n", r.item_id, r.title, r.brand, r.category));
    }
    fs::write(path, s)?;
    Ok(())
}

/// One next-item prediction instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub user: usize,
    pub history: Vec<usize>,
    pub target: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    /// Target item never seen in the training era.
    pub unseen_target: usize,
    /// User has fewer than two training-era interactions.
    pub short_history: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub labels: LabelVocab,
    pub item_category: Vec<usize>,
    pub item_brand: Vec<usize>,
    pub max_len: usize,
    /// Events with timestamp <= `train_cut` are training-era.
    pub train_cut: i64,
    /// Events in `(train_cut, valid_cut]` are validation-era.
    pub valid_cut: i64,
    /// Chronological training-era items per user.
    pub train_sequences: Vec<Vec<usize>>,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    pub dropped_valid: DropCounts,
    pub dropped_test: DropCounts,
}

impl SplitDataset {
    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    /// Training-era interaction counts per item.
    pub fn item_popularity(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items()];
        for seq in &self.train_sequences {
            for &j in seq {
                counts[j] += 1;
            }
        }
        counts
    }

    /// Items appearing at least once in the training era.
    pub fn train_vocabulary(&self) -> BTreeSet<usize> {
        self.train_sequences.iter().flatten().copied().collect()
    }

    pub fn examples(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split '{other}'"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// Timestamp at the `q` quantile of sorted timestamps (`ceil(q·N)`-th event).
fn percentile_cut(sorted: &[i64], q: f64) -> i64 {
    let n = sorted.len();
    let rank = ((q * n as f64) - 1e-9).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

fn recent(seq: &[usize], max_len: usize) -> Vec<usize> {
    seq[seq.len().saturating_sub(max_len)..].to_vec()
}

/// Chronological Split-by-Timepoint at global timestamp quantiles `q1 < q2`.
pub fn split_by_timepoint(ds: &InteractionDataset, q1: f64, q2: f64, max_len: usize) -> Result<SplitDataset> {
    if !(0.0 < q1 && q1 < q2 && q2 < 1.0) {
        return Err(Error::InvalidArgument(format!("need 0 < q1 < q2 < 1, got q1={q1}, q2={q2}")));
    }
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be positive".into()));
    }
    if ds.events.is_empty() {
        return Err(Error::EmptyInput("no interactions".into()));
    }
    let stamps: Vec<i64> = ds.events.iter().map(|e| e.timestamp).collect();
    let train_cut = percentile_cut(&stamps, q1);
    let valid_cut = percentile_cut(&stamps, q2);

    let n = ds.num_users();
    let mut train_sequences = vec![Vec::new(); n];
    let mut valid_events: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut test_events: Vec<Vec<usize>> = vec![Vec::new(); n];
    let (mut n_train, mut n_valid, mut n_test) = (0, 0, 0);
    for e in &ds.events {
        if e.timestamp <= train_cut {
            train_sequences[e.user].push(e.item);
            n_train += 1;
        } else if e.timestamp <= valid_cut {
            valid_events[e.user].push(e.item);
            n_valid += 1;
        } else {
            test_events[e.user].push(e.item);
            n_test += 1;
        }
    }
    if n_train == 0 || n_valid == 0 || n_test == 0 {
        return Err(Error::Split(format!(
            "empty segment: train={n_train}, valid={n_valid}, test={n_test} events \
             (q1={q1} -> t={train_cut}, q2={q2} -> t={valid_cut}, timestamps {}..{})",
            stamps[0],
            stamps[stamps.len() - 1]
        )));
    }

    let vocab: BTreeSet<usize> = train_sequences.iter().flatten().copied().collect();

    let mut train = Vec::new();
    for (user, seq) in train_sequences.iter().enumerate() {
        for p in 1..seq.len() {
            train.push(Example { user, history: recent(&seq[..p], max_len), target: seq[p] });
        }
    }

    let held_out = |events: &[Vec<usize>], drops: &mut DropCounts| {
        let mut out = Vec::new();
        for (user, items) in events.iter().enumerate() {
            let Some(&target) = items.first() else { continue };
            if train_sequences[user].len() < 2 {
                drops.short_history += 1;
                continue;
            }
            if !vocab.contains(&target) {
                drops.unseen_target += 1;
                continue;
            }
            out.push(Example { user, history: recent(&train_sequences[user], max_len), target });
        }
        out
    };
    let mut dropped_valid = DropCounts::default();
    let mut dropped_test = DropCounts::default();
    let valid = held_out(&valid_events, &mut dropped_valid);
    let test = held_out(&test_events, &mut dropped_test);

    Ok(SplitDataset {
        user_ids: ds.user_ids.clone(),
        item_ids: ds.item_ids.clone(),
        labels: ds.labels.clone(),
        item_category: ds.item_category.clone(),
        item_brand: ds.item_brand.clone(),
        max_len,
        train_cut,
        valid_cut,
        train_sequences,
        train,
        valid,
        test,
        dropped_valid,
        dropped_test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBase {
    pub user_vectors: Array2<f64>,
    pub item_vectors: Array2<f64>,
}

impl EmbeddingBase {
    pub fn dim(&self) -> usize {
        self.item_vectors.ncols()
    }

    pub fn all_finite(&self) -> bool {
        self.user_vectors.iter().chain(self.item_vectors.iter()).all(|v| v.is_finite())
    }
}

/// How externally supplied item vectors combine with the collaborative ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExternalMode {
    Replace,
    Concat,
}

impl std::str::FromStr for ExternalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replace" => Ok(ExternalMode::Replace),
            "concat" => Ok(ExternalMode::Concat),
            other => Err(Error::Config(format!("unknown external mode '{other}'"))),
        }
    }
}

/// Item vectors keyed by item id, e.g. text-encoder or graph embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalEmbeddings {
    pub vectors: BTreeMap<String, Vec<f64>>,
    pub dim: usize,
}

impl ExternalEmbeddings {
    /// Parse `item_id \t v_1,...,v_D` lines.
    pub fn load(path: &Path) -> Result<Self> {
        let rows = parse_lines(path, 2, |cols, line| {
            let values = cols[1]
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse { path: path.display().to_string(), line, message: e.to_string() })?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse { path: path.display().to_string(), line, message: "non-finite value".into() });
            }
            Ok((cols[0].to_string(), values, line))
        })?;
        let Some(dim) = rows.first().map(|r| r.1.len()) else {
            return Err(Error::EmptyInput(format!("{} has no rows", path.display())));
        };
        let mut vectors = BTreeMap::new();
        for (id, v, line) in rows {
            if v.len() != dim {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line,
                    message: format!("expected {dim} values, found {}", v.len()),
                });
            }
            vectors.insert(id, v);
        }
        Ok(Self { vectors, dim })
    }
}

fn l2_normalised(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        v.to_vec()
    }
}

pub fn interaction_matrix(ds: &SplitDataset) -> SparseBinary {
    SparseBinary::from_rows(ds.num_items(), ds.train_sequences.iter().map(|s| s.iter().copied()))
}

/// Collaborative item vectors from the truncated SVD of the binary train-era
/// interaction matrix (`V_D · diag(s_D)`), users as the mean of their items.
pub fn build_base_embeddings(
    ds: &SplitDataset,
    dim: usize,
    external: Option<(&ExternalEmbeddings, ExternalMode)>,
) -> Result<EmbeddingBase> {
    if dim < 2 {
        return Err(Error::InvalidArgument(format!("embedding width must be >= 2, got {dim}")));
    }
    let matrix = interaction_matrix(ds);
    let svd = truncated_svd(&matrix, dim);
    if svd.rank < dim {
        warn!("requested width {dim} exceeds interaction-matrix rank {}; trailing dimensions zero-padded", svd.rank);
    }
    let collaborative = svd.scaled_right_vectors();

    let items = match external {
        None => collaborative,
        Some((ext, mode)) => {
            let missing: Vec<String> =
                ds.item_ids.iter().filter(|id| !ext.vectors.contains_key(*id)).cloned().collect();
            if !missing.is_empty() {
                return Err(Error::MissingEmbeddings(missing));
            }
            let m = ds.num_items();
            let ext_matrix = Array2::from_shape_fn((m, ext.dim), |(j, c)| ext.vectors[&ds.item_ids[j]][c]);
            let ext_matrix = {
                let mut out = ext_matrix;
                for mut row in out.rows_mut() {
                    let n = l2_normalised(&row.to_vec());
                    row.assign(&ndarray::Array1::from(n));
                }
                out
            };
            match mode {
                ExternalMode::Replace => ext_matrix,
                ExternalMode::Concat => ndarray::concatenate(ndarray::Axis(1), &[collaborative.view(), ext_matrix.view()])
                    .expect("row counts match"),
            }
        }
    };

    let width = items.ncols();
    let mut users = Array2::zeros((ds.num_users(), width));
    for (u, seq) in ds.train_sequences.iter().enumerate() {
        let distinct: BTreeSet<usize> = seq.iter().copied().collect();
        if distinct.is_empty() {
            continue;
        }
        let mut row = users.row_mut(u);
        for &j in &distinct {
            row += &items.row(j);
        }
        row /= distinct.len() as f64;
    }
    let base = EmbeddingBase { user_vectors: users, item_vectors: items };
    if !base.all_finite() {
        return Err(Error::Numeric { component: "base embeddings".into(), detail: "non-finite entry".into() });
    }
    Ok(base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(u: &str, i: &str, t: i64) -> Interaction {
        Interaction { user_id: u.into(), item_id: i.into(), timestamp: t }
    }

    fn cat(i: &str, c: &str) -> CatalogEntry {
        CatalogEntry { item_id: i.into(), title: format!("title {i}"), brand: "b".into(), category: c.into() }
    }

    #[test]
    fn counts_users_and_items() {
        let ds = InteractionDataset::from_records(
            vec![ev("u1", "a", 1), ev("u2", "b", 2), ev("u1", "b", 3)],
            vec![cat("a", "x"), cat("b", "y")],
        )
        .unwrap();
        assert_eq!((ds.num_users(), ds.num_items()), (2, 2));
    }

    #[test]
    fn duplicate_triples_collapse() {
        let ds = InteractionDataset::from_records(vec![ev("u", "a", 5), ev("u", "a", 5)], vec![cat("a", "x")]).unwrap();
        assert_eq!(ds.events.len(), 1);
    }

    #[test]
    fn missing_catalog_items_get_unknown_labels() {
        let ds = InteractionDataset::from_records(vec![ev("u", "zz", 1)], vec![cat("a", "x")]).unwrap();
        let j = ds.item_ids.iter().position(|i| i == "zz").unwrap();
        assert_eq!(ds.catalog[j].category, UNKNOWN_LABEL);
        assert_eq!(ds.labels.categories[ds.item_category[j]], UNKNOWN_LABEL);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(InteractionDataset::from_records(vec![], vec![]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn malformed_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.tsv");
        fs::write(&path, "u\ta\t1\nu\tb\n").unwrap();
        match read_interactions(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&path, "u\ta\tnot-a-number\n").unwrap();
        assert!(matches!(read_interactions(&path), Err(Error::Parse { line: 1, .. })));
    }

    fn single_user_20() -> InteractionDataset {
        let items: Vec<String> = (0..5).map(|i| format!("i{i}")).collect();
        let rows = (1..=20).map(|t| ev("u", &items[(t as usize) % 5], t)).collect();
        InteractionDataset::from_records(rows, items.iter().map(|i| cat(i, "c")).collect()).unwrap()
    }

    #[test]
    fn percentile_split_of_twenty_events() {
        let split = split_by_timepoint(&single_user_20(), 0.9, 0.95, 20).unwrap();
        assert_eq!(split.train_cut, 18);
        assert_eq!(split.valid_cut, 19);
        assert_eq!(split.train_sequences[0].len(), 18);
        assert_eq!(split.valid.len(), 1);
        assert_eq!(split.test.len(), 1);
    }

    #[test]
    fn history_capped_to_latest_items() {
        let items: Vec<String> = (0..30).map(|i| format!("i{i}")).collect();
        let mut rows: Vec<_> = (0..25).map(|t| ev("u", &items[t], t as i64)).collect();
        rows.push(ev("u", &items[3], 100));
        rows.push(ev("u", &items[4], 101));
        // filler events from another user push the percentiles
        for t in 0..10 {
            rows.push(ev("v", &items[t], t as i64));
        }
        let ds = InteractionDataset::from_records(rows, items.iter().map(|i| cat(i, "c")).collect()).unwrap();
        let split = split_by_timepoint(&ds, 0.9, 0.95, 20).unwrap();
        let u = split.user_ids.iter().position(|x| x == "u").unwrap();
        let ex = split.test.iter().find(|e| e.user == u).unwrap();
        assert_eq!(ex.history.len(), 20);
        let seq = &split.train_sequences[u];
        assert!(seq.len() > 20);
        assert_eq!(ex.history, seq[seq.len() - 20..].to_vec());
        assert!(split.train.iter().all(|e| e.history.len() <= 20));
    }

    #[test]
    fn unseen_test_target_is_dropped() {
        let items: Vec<String> = (0..6).map(|i| format!("i{i}")).collect();
        let mut rows: Vec<_> = (1..=18).map(|t| ev("u", &items[(t as usize) % 4], t)).collect();
        rows.push(ev("u", &items[1], 19));
        rows.push(ev("u", &items[5], 20));
        let ds = InteractionDataset::from_records(rows, items.iter().map(|i| cat(i, "c")).collect()).unwrap();
        let split = split_by_timepoint(&ds, 0.9, 0.95, 20).unwrap();
        assert!(split.test.is_empty());
        assert_eq!(split.dropped_test.unseen_target, 1);
        assert_eq!(split.valid.len(), 1);
    }

    #[test]
    fn empty_segment_reports_percentiles() {
        let rows = (0..10).map(|i| ev("u", "a", if i < 9 { 1 } else { 2 })).collect::<Vec<_>>();
        let rows: Vec<_> = rows.into_iter().enumerate().map(|(k, mut r)| {
            r.item_id = format!("a{k}");
            r
        }).collect();
        let ds = InteractionDataset::from_records(rows, vec![]).unwrap();
        match split_by_timepoint(&ds, 0.9, 0.95, 20) {
            Err(Error::Split(msg)) => assert!(msg.contains("q1=0.9")),
            other => panic!("expected split error, got {other:?}"),
        }
    }

    #[test]
    fn identity_interactions_give_orthogonal_items() {
        let items: Vec<String> = (0..4).map(|i| format!("i{i}")).collect();
        let mut rows = Vec::new();
        for u in 0..4 {
            rows.push(ev(&format!("u{u}"), &items[u], u as i64));
        }
        rows.push(ev("late", "i0", 10));
        rows.push(ev("late", "i1", 11));
        let ds = InteractionDataset::from_records(rows, items.iter().map(|i| cat(i, "c")).collect()).unwrap();
        let split = split_by_timepoint(&ds, 0.6, 0.8, 20).unwrap();
        let base = build_base_embeddings(&split, 4, None).unwrap();
        let q = &base.item_vectors;
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = q.row(a).dot(&q.row(b));
                if a == b {
                    assert!((dot - 1.0).abs() < 1e-10);
                } else {
                    assert!(dot.abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn singleton_user_vector_equals_item_vector() {
        let items: Vec<String> = (0..3).map(|i| format!("i{i}")).collect();
        let rows = vec![
            ev("solo", "i2", 1),
            ev("a", "i0", 2),
            ev("a", "i1", 3),
            ev("a", "i2", 4),
            ev("b", "i0", 5),
            ev("b", "i1", 6),
            ev("b", "i0", 7),
            ev("a", "i1", 8),
        ];
        let ds = InteractionDataset::from_records(rows, items.iter().map(|i| cat(i, "c")).collect()).unwrap();
        let split = split_by_timepoint(&ds, 0.7, 0.85, 20).unwrap();
        let base = build_base_embeddings(&split, 2, None).unwrap();
        let solo = split.user_ids.iter().position(|u| u == "solo").unwrap();
        let j = split.item_ids.iter().position(|i| i == "i2").unwrap();
        assert_eq!(base.user_vectors.row(solo), base.item_vectors.row(j));
    }

    #[test]
    fn external_file_missing_items_is_an_error() {
        let split = split_by_timepoint(&single_user_20(), 0.9, 0.95, 20).unwrap();
        let mut vectors = BTreeMap::new();
        vectors.insert("i0".to_string(), vec![1.0, 0.0]);
        let ext = ExternalEmbeddings { vectors, dim: 2 };
        match build_base_embeddings(&split, 2, Some((&ext, ExternalMode::Replace))) {
            Err(Error::MissingEmbeddings(ids)) => assert_eq!(ids.len(), 4),
            other => panic!("expected missing embeddings, got {other:?}"),
        }
    }

    #[test]
    fn external_vectors_are_normalised_and_concatenated() {
        let split = split_by_timepoint(&single_user_20(), 0.9, 0.95, 20).unwrap();
        let vectors = split.item_ids.iter().enumerate().map(|(j, id)| (id.clone(), vec![3.0 + j as f64, 4.0])).collect();
        let ext = ExternalEmbeddings { vectors, dim: 2 };
        let replaced = build_base_embeddings(&split, 2, Some((&ext, ExternalMode::Replace))).unwrap();
        for row in replaced.item_vectors.rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
        let concat = build_base_embeddings(&split, 2, Some((&ext, ExternalMode::Concat))).unwrap();
        assert_eq!(concat.dim(), 4);
    }

    #[test]
    fn width_above_rank_zero_pads() {
        let split = split_by_timepoint(&single_user_20(), 0.9, 0.95, 20).unwrap();
        let base = build_base_embeddings(&split, 4, None).unwrap();
        // one user -> rank 1
        for row in base.item_vectors.rows() {
            assert_eq!(&row.to_vec()[1..], &[0.0, 0.0, 0.0]);
        }
    }
}
