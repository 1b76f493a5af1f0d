//! Truncated SVD for collaborative embeddings.
//!
//! Small matrices go through a dense SVD; large sparse interaction matrices use
//! a randomized range finder with power iterations.

use nalgebra::DMatrix;
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::seeded;

/// Dense route is used up to this many matrix entries.
pub const DENSE_LIMIT: usize = 4_000_000;
const OVERSAMPLE: usize = 10;
const POWER_ITERS: usize = 4;

/// Binary matrix stored as sorted, deduplicated column lists per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBinary {
    pub rows: Vec<Vec<usize>>,
    pub cols: usize,
}

impl SparseBinary {
    pub fn from_rows<I, R>(cols: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = usize>,
    {
        let rows = rows
            .into_iter()
            .map(|r| {
                let mut v: Vec<usize> = r.into_iter().collect();
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect();
        Self { rows, cols }
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.nrows(), self.cols));
        for (i, r) in self.rows.iter().enumerate() {
            for &j in r {
                a[[i, j]] = 1.0;
            }
        }
        a
    }

    /// `A · x` for dense `x: cols × k`.
    fn mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows(), x.ncols());
        for (i, r) in self.rows.iter().enumerate() {
            for &j in r {
                for c in 0..x.ncols() {
                    out[(i, c)] += x[(j, c)];
                }
            }
        }
        out
    }

    /// `Aᵀ · y` for dense `y: rows × k`.
    fn tmul(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.cols, y.ncols());
        for (i, r) in self.rows.iter().enumerate() {
            for &j in r {
                for c in 0..y.ncols() {
                    out[(j, c)] += y[(i, c)];
                }
            }
        }
        out
    }
}

/// Rank-`k` factors `U diag(s) Vᵀ`, zero-padded past the numerical rank.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd {
    pub u: Array2<f64>,
    pub s: Vec<f64>,
    pub vt: Array2<f64>,
    pub rank: usize,
}

impl TruncatedSvd {
    /// Right singular directions scaled by their singular values (`V · diag(s)`).
    pub fn scaled_right_vectors(&self) -> Array2<f64> {
        let mut v = self.vt.t().to_owned();
        for (c, s) in self.s.iter().enumerate() {
            v.column_mut(c).mapv_inplace(|x| x * s);
        }
        v
    }

    pub fn reconstruct(&self) -> Array2<f64> {
        let mut us = self.u.clone();
        for (c, s) in self.s.iter().enumerate() {
            us.column_mut(c).mapv_inplace(|x| x * s);
        }
        us.dot(&self.vt)
    }
}

fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Sort by descending singular value, truncate/pad to `k`, fix signs so the
/// largest-magnitude entry of each right vector is positive.
fn finish(u: &DMatrix<f64>, s: &[f64], vt: &DMatrix<f64>, k: usize) -> TruncatedSvd {
    let (n, m) = (u.nrows(), vt.ncols());
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let smax = order.first().map(|&i| s[i]).unwrap_or(0.0);
    let tol = smax * (n.max(m) as f64) * f64::EPSILON;
    let rank = s.iter().filter(|&&v| v > tol && v > 0.0).count().min(k);

    let mut out_u = Array2::zeros((n, k));
    let mut out_vt = Array2::zeros((k, m));
    let mut out_s = vec![0.0; k];
    for (c, &src) in order.iter().take(rank).enumerate() {
        let mut sign = 1.0;
        let mut best = 0.0;
        for j in 0..m {
            let v = vt[(src, j)];
            if v.abs() > best + 1e-12 {
                best = v.abs();
                sign = v.signum();
            }
        }
        out_s[c] = s[src];
        for i in 0..n {
            out_u[[i, c]] = sign * u[(i, src)];
        }
        for j in 0..m {
            out_vt[[c, j]] = sign * vt[(src, j)];
        }
    }
    TruncatedSvd { u: out_u, s: out_s, vt: out_vt, rank }
}

pub fn truncated_svd_dense(a: &Array2<f64>, k: usize) -> TruncatedSvd {
    let svd = to_nalgebra(a).svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vt");
    finish(&u, svd.singular_values.as_slice(), &vt, k)
}

/// Randomized truncated SVD (range finder + power iterations).
pub fn truncated_svd_randomized(a: &SparseBinary, k: usize, seed: u64) -> TruncatedSvd {
    let width = (k + OVERSAMPLE).min(a.nrows()).min(a.cols);
    let mut rng = seeded(seed, 0);
    let omega = DMatrix::from_fn(a.cols, width, |_, _| StandardNormal.sample(&mut rng));
    let mut q = a.mul(&omega).qr().q();
    for _ in 0..POWER_ITERS {
        let z = a.tmul(&q).qr().q();
        q = a.mul(&z).qr().q();
    }
    // B = Qᵀ A, computed as (Aᵀ Q)ᵀ
    let b = a.tmul(&q).transpose();
    let svd = b.svd(true, true);
    let u = &q * svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vt");
    finish(&u, svd.singular_values.as_slice(), &vt, k)
}

pub fn truncated_svd(a: &SparseBinary, k: usize) -> TruncatedSvd {
    if a.nrows() * a.cols <= DENSE_LIMIT {
        truncated_svd_dense(&a.to_dense(), k)
    } else {
        truncated_svd_randomized(a, k, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normal;

    #[test]
    fn rank_two_reconstruction_is_exact() {
        let mut rng = seeded(7, 0);
        let left = standard_normal(&mut rng, 12, 2);
        let right = standard_normal(&mut rng, 2, 9);
        // independent oracle: the product itself
        let a = left.dot(&right);
        let svd = truncated_svd_dense(&a, 2);
        assert_eq!(svd.rank, 2);
        let err = (&svd.reconstruct() - &a).mapv(|x| x * x).sum().sqrt();
        assert!(err <= 1e-8, "reconstruction error {err}");
    }

    #[test]
    fn randomized_matches_dense_on_low_rank_binary() {
        let rows: Vec<Vec<usize>> = (0..60).map(|i| (0..40).filter(|j| (i * 7 + j * 3) % 5 == 0 || j % 13 == i % 13).collect()).collect();
        let a = SparseBinary::from_rows(40, rows);
        let dense = truncated_svd_dense(&a.to_dense(), 4);
        let random = truncated_svd_randomized(&a, 4, 3);
        for (x, y) in dense.s.iter().zip(&random.s) {
            assert!((x - y).abs() < 1e-6 * x.max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn pads_past_rank() {
        let a = SparseBinary::from_rows(3, vec![vec![0, 1, 2], vec![0, 1, 2]]);
        let svd = truncated_svd(&a, 3);
        assert_eq!(svd.rank, 1);
        assert_eq!(svd.s[1], 0.0);
        assert!(svd.vt.row(2).iter().all(|&v| v == 0.0));
    }
}
