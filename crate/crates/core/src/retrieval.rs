//! Hybrid scoring, top-K ranking and HR/NDCG evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::warn;
use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const DEFAULT_PI: f64 = 0.05;
pub const CUTOFFS: [usize; 2] = [10, 20];

/// Which predicted labels must match for the score bonus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchRule {
    Category,
    CategoryAndBrand,
}

impl FromStr for MatchRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "category" => Ok(Self::Category),
            "category+brand" => Ok(Self::CategoryAndBrand),
            other => Err(Error::Config(format!("unknown match rule '{other}'"))),
        }
    }
}

impl fmt::Display for MatchRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Category => "category",
            Self::CategoryAndBrand => "category+brand",
        })
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub fn compensated_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        compensated_sum(values.iter().copied()) / values.len() as f64
    }
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = compensated_mean(values);
    (compensated_sum(values.iter().map(|v| (v - m) * (v - m))) / values.len() as f64).sqrt()
}

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(a.dot(&b) / (na * nb))
}

/// `cos(ŷ, q) · (1 + π)` with `π = pi_val` when the labels match.
pub fn hybrid_score(y: ArrayView1<f64>, q: ArrayView1<f64>, matches: bool, pi_val: f64) -> Result<f64> {
    let pi = if matches { pi_val } else { 0.0 };
    Ok(cosine(y, q)? * (1.0 + pi))
}

/// Candidate items with pre-normalised vectors.
#[derive(Debug, Clone)]
pub struct ItemIndex {
    unit: Array2<f64>,
    /// Items with a zero vector can never be ranked.
    valid: Vec<bool>,
    pub category: Vec<usize>,
    pub brand: Vec<usize>,
}

impl ItemIndex {
    pub fn new(items: &Array2<f64>, category: Vec<usize>, brand: Vec<usize>) -> Self {
        let mut unit = items.clone();
        let mut valid = vec![true; items.nrows()];
        for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            } else {
                valid[i] = false;
            }
        }
        Self { unit, valid, category, brand }
    }

    pub fn len(&self) -> usize {
        self.unit.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.unit.nrows() == 0
    }

    pub fn is_valid(&self, item: usize) -> bool {
        self.valid[item]
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Hybrid scores for every item; zero-vector items get `-inf`.
    pub fn scores(&self, y: ArrayView1<f64>, category: usize, brand: usize, pi_val: f64, rule: MatchRule) -> Result<Vec<f64>> {
        let n = y.dot(&y).sqrt();
        if n == 0.0 {
            return Err(Error::ZeroVector);
        }
        let cos = self.unit.dot(&y) / n;
        Ok(cos
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                if !self.valid[j] {
                    return f64::NEG_INFINITY;
                }
                let hit = self.category[j] == category && (rule == MatchRule::Category || self.brand[j] == brand);
                if hit {
                    c * (1.0 + pi_val)
                } else {
                    c
                }
            })
            .collect())
    }
}

/// Descending score, ascending id.
fn better(scores: &[f64], a: usize, b: usize) -> std::cmp::Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Top `k` candidate ids, skipping `exclude` and `-inf` scores.
pub fn rank_topk(scores: &[f64], k: usize, exclude: &BTreeSet<usize>) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..scores.len())
        .filter(|i| !exclude.contains(i) && scores[*i] != f64::NEG_INFINITY)
        .collect();
    if k > cand.len() {
        warn!("requested top-{k} from {} candidates; returning all", cand.len());
    } else if k < cand.len() {
        cand.select_nth_unstable_by(k, |&a, &b| better(scores, a, b));
        cand.truncate(k);
    }
    cand.sort_by(|&a, &b| better(scores, a, b));
    cand
}

/// One user's ranked list with scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRanking {
    pub user: usize,
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
}

impl ScoredRanking {
    pub fn from_scores(user: usize, scores: &[f64], k: usize, exclude: &BTreeSet<usize>) -> Self {
        let items = rank_topk(scores, k, exclude);
        let s = items.iter().map(|&i| scores[i]).collect();
        Self { user, items, scores: s }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserOutcome {
    pub user: usize,
    pub target: usize,
    /// 1-based rank within the retained list, if present.
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cutoffs: Vec<usize>,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub per_user: Vec<UserOutcome>,
}

impl MetricReport {
    fn index(&self, k: usize) -> usize {
        self.cutoffs.iter().position(|&c| c == k).unwrap_or_else(|| panic!("cutoff {k} was not evaluated"))
    }

    pub fn hr(&self, k: usize) -> f64 {
        self.hr[self.index(k)]
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.ndcg[self.index(k)]
    }

    pub fn num_users(&self) -> usize {
        self.per_user.len()
    }
}

/// Single-relevant-item NDCG.
pub fn ndcg_at(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

/// HR@K and NDCG@K over `targets` (user, item) using each user's ranking.
pub fn compute_metrics(rankings: &[ScoredRanking], targets: &[(usize, usize)], cutoffs: &[usize]) -> Result<MetricReport> {
    let by_user: BTreeMap<usize, &ScoredRanking> = rankings.iter().map(|r| (r.user, r)).collect();
    let mut per_user = Vec::with_capacity(targets.len());
    for &(user, target) in targets {
        let r = by_user.get(&user).ok_or(Error::MissingRanking(user))?;
        let rank = r.items.iter().position(|&i| i == target).map(|p| p + 1);
        per_user.push(UserOutcome { user, target, rank });
    }
    let mut hr = Vec::with_capacity(cutoffs.len());
    let mut ndcg = Vec::with_capacity(cutoffs.len());
    for &k in cutoffs {
        let hits: Vec<f64> = per_user.iter().map(|u| if matches!(u.rank, Some(r) if r <= k) { 1.0 } else { 0.0 }).collect();
        let gains: Vec<f64> = per_user.iter().map(|u| ndcg_at(u.rank, k)).collect();
        hr.push(compensated_mean(&hits));
        ndcg.push(compensated_mean(&gains));
    }
    Ok(MetricReport { cutoffs: cutoffs.to_vec(), hr, ndcg, per_user })
}

/// Rank every user by global popularity, excluding their history.
pub fn popularity_rankings(popularity: &[usize], users: &[(usize, BTreeSet<usize>)], index: &ItemIndex, k: usize) -> Vec<ScoredRanking> {
    let scores: Vec<f64> = popularity
        .iter()
        .enumerate()
        .map(|(j, &p)| if index.is_valid(j) { p as f64 } else { f64::NEG_INFINITY })
        .collect();
    users.iter().map(|(u, hist)| ScoredRanking::from_scores(*u, &scores, k, hist)).collect()
}

/// Uniformly random candidate order per user.
pub fn random_rankings(users: &[(usize, BTreeSet<usize>)], index: &ItemIndex, k: usize, rng: &mut StreamRng) -> Vec<ScoredRanking> {
    users
        .iter()
        .map(|(u, hist)| {
            let mut cand: Vec<usize> = (0..index.len()).filter(|j| index.is_valid(*j) && !hist.contains(j)).collect();
            cand.shuffle(rng);
            cand.truncate(k);
            let scores = (0..cand.len()).map(|r| -(r as f64)).collect();
            ScoredRanking { user: *u, items: cand, scores }
        })
        .collect()
}

/// Expected HR@K of a uniformly random ranking over `m` candidates.
pub fn random_hit_rate(k: usize, m: usize) -> f64 {
    if m == 0 {
        0.0
    } else {
        (k.min(m)) as f64 / m as f64
    }
}

/// One line of metric output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub dataset: String,
    pub split: String,
    pub metric: String,
    pub k: usize,
    pub value: f64,
    pub seed: String,
}

impl MetricRecord {
    pub fn from_report(report: &MetricReport, dataset: &str, split: &str, seed: &str) -> Vec<Self> {
        let mut out = Vec::new();
        for (i, &k) in report.cutoffs.iter().enumerate() {
            for (metric, value) in [("HR", report.hr[i]), ("NDCG", report.ndcg[i])] {
                out.push(Self {
                    dataset: dataset.into(),
                    split: split.into(),
                    metric: metric.into(),
                    k,
                    value,
                    seed: seed.into(),
                });
            }
        }
        out
    }
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}\t{}\t{}", self.dataset, self.split, self.metric, self.k, self.value, self.seed)
    }
}

pub fn write_metrics<W: Write>(mut w: W, records: &[MetricRecord]) -> Result<()> {
    writeln!(w, "dataset\tsplit\tmetric\tk\tvalue\tseed")?;
    for r in records {
        writeln!(w, "{r}")?;
    }
    Ok(())
}

/// `user_id \t item_id \t rank \t score` lines.
pub fn write_rankings<W: Write>(mut w: W, rankings: &[ScoredRanking], user_ids: &[String], item_ids: &[String]) -> Result<()> {
    for r in rankings {
        for (pos, (&item, score)) in r.items.iter().zip(&r.scores).enumerate() {
            writeln!(w, "{}\t{}\t{}\t{}", user_ids[r.user], item_ids[item], pos + 1, score)?;
        }
    }
    Ok(())
}

/// Mean and standard deviation of each metric over repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub cutoffs: Vec<usize>,
    pub hr_mean: Vec<f64>,
    pub hr_std: Vec<f64>,
    pub ndcg_mean: Vec<f64>,
    pub ndcg_std: Vec<f64>,
    pub runs: usize,
}

impl SeedSummary {
    pub fn from_reports(reports: &[MetricReport]) -> Result<Self> {
        let first = reports.first().ok_or(Error::EmptyInput("no reports to summarise".into()))?;
        let n = first.cutoffs.len();
        let col = |f: &dyn Fn(&MetricReport) -> &Vec<f64>, i: usize| -> Vec<f64> { reports.iter().map(|r| f(r)[i]).collect() };
        let mut s = Self {
            cutoffs: first.cutoffs.clone(),
            hr_mean: vec![],
            hr_std: vec![],
            ndcg_mean: vec![],
            ndcg_std: vec![],
            runs: reports.len(),
        };
        for i in 0..n {
            let h = col(&|r| &r.hr, i);
            let g = col(&|r| &r.ndcg, i);
            s.hr_mean.push(compensated_mean(&h));
            s.hr_std.push(std_dev(&h));
            s.ndcg_mean.push(compensated_mean(&g));
            s.ndcg_std.push(std_dev(&g));
        }
        Ok(s)
    }

    pub fn hr(&self, k: usize) -> (f64, f64) {
        let i = self.cutoffs.iter().position(|&c| c == k).expect("evaluated cutoff");
        (self.hr_mean[i], self.hr_std[i])
    }

    pub fn ndcg(&self, k: usize) -> (f64, f64) {
        let i = self.cutoffs.iter().position(|&c| c == k).expect("evaluated cutoff");
        (self.ndcg_mean[i], self.ndcg_std[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn hybrid_score_examples() {
        let e = array![1.0, 0.0];
        assert!((hybrid_score(e.view(), e.view(), true, 0.05).unwrap() - 1.05).abs() < 1e-15);
        assert_eq!(hybrid_score(e.view(), array![0.0, 3.0].view(), true, 0.05).unwrap(), 0.0);
        let q = array![0.8, 0.6];
        assert!((hybrid_score(e.view(), q.view(), true, 0.05).unwrap() - 0.84).abs() < 1e-15);
        assert!(matches!(hybrid_score(e.view(), array![0.0, 0.0].view(), false, 0.05), Err(Error::ZeroVector)));
    }

    #[test]
    fn topk_examples() {
        let none = BTreeSet::new();
        assert_eq!(rank_topk(&[0.9, 0.1, 0.5], 2, &none), vec![0, 2]);
        assert_eq!(rank_topk(&[0.3, 0.3, 0.3], 3, &none), vec![0, 1, 2]);
        let hist: BTreeSet<usize> = [0].into();
        assert_eq!(rank_topk(&[0.9, 0.1, 0.5], 5, &hist), vec![2, 1]);
    }

    #[test]
    fn topk_matches_full_sort_oracle() {
        let mut rng = seeded(1, 0);
        for _ in 0..1000 {
            let m = rng.random_range(1..60);
            // coarse values force ties
            let scores: Vec<f64> = (0..m).map(|_| (rng.random_range(0..20) as f64) / 4.0).collect();
            let k = rng.random_range(1..=m);
            let mut oracle: Vec<usize> = (0..m).collect();
            oracle.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            oracle.truncate(k);
            assert_eq!(rank_topk(&scores, k, &BTreeSet::new()), oracle);
        }
    }

    #[test]
    fn metrics_on_hand_instance() {
        let rankings = vec![
            ScoredRanking { user: 0, items: vec![5, 6, 7], scores: vec![3.0, 2.0, 1.0] },
            ScoredRanking { user: 1, items: vec![1, 2], scores: vec![2.0, 1.0] },
            ScoredRanking { user: 2, items: vec![9], scores: vec![1.0] },
        ];
        let r = compute_metrics(&rankings, &[(0, 7), (1, 1), (2, 4)], &[10, 20]).unwrap();
        assert_eq!(r.per_user[0].rank, Some(3));
        assert_eq!(ndcg_at(Some(3), 10), 0.5);
        assert_eq!(r.hr(10), 2.0 / 3.0);
        assert_eq!(r.ndcg(10), (0.5 + 1.0) / 3.0);
        assert!(matches!(compute_metrics(&rankings, &[(3, 1)], &[10]), Err(Error::MissingRanking(3))));
        let two = compute_metrics(&rankings[..2], &[(0, 7), (1, 99)], &[10]).unwrap();
        assert_eq!(two.hr(10), 0.5);
    }

    #[test]
    fn zero_pi_equals_cosine_ranking() {
        let items = array![[1.0, 0.0], [0.6, 0.8], [0.0, 1.0], [0.0, 0.0]];
        let idx = ItemIndex::new(&items, vec![0, 1, 1, 0], vec![0, 0, 0, 0]);
        let y = array![0.9, 0.5];
        let hybrid = idx.scores(y.view(), 1, 0, 0.0, MatchRule::Category).unwrap();
        let plain: Vec<f64> = (0..3).map(|j| cosine(y.view(), items.row(j)).unwrap()).collect();
        for j in 0..3 {
            assert!((hybrid[j] - plain[j]).abs() < 1e-15);
        }
        assert_eq!(hybrid[3], f64::NEG_INFINITY);
        assert_eq!(rank_topk(&hybrid, 10, &BTreeSet::new()).len(), 3);
    }

    #[test]
    fn compensated_sum_recovers_cancellation() {
        assert_eq!(compensated_sum([1e16, 1.0, -1e16]), 1.0);
    }

    #[test]
    fn summary_mean_and_std() {
        let mk = |h: f64| MetricReport { cutoffs: vec![10], hr: vec![h], ndcg: vec![h / 2.0], per_user: vec![] };
        let s = SeedSummary::from_reports(&[mk(0.2), mk(0.4)]).unwrap();
        assert!((s.hr(10).0 - 0.3).abs() < 1e-15);
        assert!((s.hr(10).1 - 0.1).abs() < 1e-15);
    }

    #[test]
    fn tsv_lines() {
        let r = MetricReport { cutoffs: vec![10], hr: vec![0.5], ndcg: vec![0.25], per_user: vec![] };
        let recs = MetricRecord::from_report(&r, "toy", "test", "7");
        let mut buf = Vec::new();
        write_metrics(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("toy\ttest\tHR\t10\t0.5\t7"));
        assert!(text.contains("toy\ttest\tNDCG\t10\t0.25\t7"));
    }

    proptest! {
        #[test]
        fn scaling_preserves_rankings(
            y in proptest::collection::vec(-1.0f64..1.0, 3),
            s in 0.01f64..100.0,
            seed in 0u64..1000,
        ) {
            prop_assume!(y.iter().any(|v| v.abs() > 1e-3));
            let items = crate::rng::standard_normal(&mut seeded(seed, 0), 30, 3);
            let cats: Vec<usize> = (0..30).map(|j| j % 3).collect();
            let idx = ItemIndex::new(&items, cats.clone(), vec![0; 30]);
            let scaled = ItemIndex::new(&(&items * s), cats, vec![0; 30]);
            let y = ndarray::Array1::from(y);
            let a = idx.scores(y.view(), 1, 0, 0.05, MatchRule::Category).unwrap();
            let b = scaled.scores((&y * s).view(), 1, 0, 0.05, MatchRule::Category).unwrap();
            let none = BTreeSet::new();
            prop_assert_eq!(rank_topk(&a, 10, &none), rank_topk(&b, 10, &none));
        }

        #[test]
        fn raising_pi_never_hurts_matching_items(
            seed in 0u64..1000,
            lo in 0.0f64..0.2,
            extra in 0.0f64..0.5,
        ) {
            let mut rng = seeded(seed, 1);
            let items = crate::rng::standard_normal(&mut rng, 25, 4);
            let y = crate::rng::standard_normal(&mut rng, 1, 4).row(0).to_owned();
            let cats: Vec<usize> = (0..25).map(|j| j % 2).collect();
            let idx = ItemIndex::new(&items, cats.clone(), vec![0; 25]);
            let a = idx.scores(y.view(), 0, 0, lo, MatchRule::Category).unwrap();
            let b = idx.scores(y.view(), 0, 0, lo + extra, MatchRule::Category).unwrap();
            let none = BTreeSet::new();
            let ra = rank_topk(&a, 25, &none);
            let rb = rank_topk(&b, 25, &none);
            // the multiplicative bonus lowers negative scores, so the property is
            // checked for matching items with non-negative cosine
            for j in (0..25).filter(|j| cats[*j] == 0 && a[*j] >= 0.0) {
                let pa = ra.iter().position(|&x| x == j).unwrap();
                let pb = rb.iter().position(|&x| x == j).unwrap();
                let beaten_a = ra[..pa].iter().filter(|&&x| cats[x] == 1).count();
                let beaten_b = rb[..pb].iter().filter(|&&x| cats[x] == 1).count();
                prop_assert!(beaten_b <= beaten_a);
            }
        }

        #[test]
        fn ndcg_equals_hr_when_hits_are_first(hits in proptest::collection::vec(any::<bool>(), 1..40)) {
            let rankings: Vec<ScoredRanking> = hits.iter().enumerate()
                .map(|(u, &h)| ScoredRanking { user: u, items: if h { vec![u, 1000] } else { vec![1000] }, scores: vec![1.0; if h { 2 } else { 1 }] })
                .collect();
            let targets: Vec<(usize, usize)> = (0..hits.len()).map(|u| (u, u)).collect();
            let r = compute_metrics(&rankings, &targets, &[10]).unwrap();
            prop_assert_eq!(r.hr(10), r.ndcg(10));
        }
    }
}
