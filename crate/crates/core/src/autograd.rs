//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles; calling
//! [`Tape::backward`] on a scalar (1×1) node walks the record in reverse and
//! returns the gradient of that scalar with respect to every node. All
//! tensors are 2-D (`rows × cols`); vectors are represented as `1 × n` rows.

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `a + row` broadcast over rows of `a`.
    AddRow(usize, usize),
    /// `a * row` broadcast over rows of `a`.
    MulRow(usize, usize),
    /// `a + col` broadcast over columns of `a`.
    AddCol(usize, usize),
    /// `a * col` broadcast over columns of `a`.
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Silu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    SumAll(usize),
    MeanAll(usize),
    /// Sum over columns, producing `rows × 1`.
    SumCols(usize),
    /// Mean over rows, producing `1 × cols`.
    MeanRows(usize),
    Transpose(usize),
    SoftmaxRows(usize),
    /// Row-wise standardisation; caches the inverse standard deviation per row.
    LayerNorm(usize, Vec<f64>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    GatherRows(usize, Vec<usize>),
    /// Mean negative log-likelihood; caches the softmax probabilities.
    CrossEntropy(usize, Vec<usize>, Array2<f64>),
    /// `out[i][b] = ||a_i - a_b||^2`.
    PairwiseSqDist(usize),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients returned by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Array2<f64> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Array2::zeros(self.shapes[v.0]),
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1×n row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a.0, row.0))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a 1×n row");
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a.0, row.0))
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "add_col expects an n×1 column");
        let v = self.value(a) + self.value(col);
        self.push(v, Op::AddCol(a.0, col.0))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "mul_col expects an n×1 column");
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a.0, col.0))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a.0, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::AddScalar(a.0))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(silu);
        self.push(v, Op::Silu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Log(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push(v, Op::MeanAll(a.0))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a.0))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.nrows() as f64;
        let v = (x.sum_axis(Axis(0)) / n).insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a.0))
    }

    /// Standardise each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let cols = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / cols;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / cols;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm(a.0, inv_std))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a.0, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a.0, start))
    }

    /// Select rows by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), idx);
        self.push(v, Op::GatherRows(a.0, idx.to_vec()))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), targets.len(), "one target per logit row");
        let probs = softmax_rows(x);
        let mut nll = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            nll += lse - row[t];
        }
        let v = Array2::from_elem((1, 1), nll / targets.len() as f64);
        self.push(v, Op::CrossEntropy(logits.0, targets.to_vec(), probs))
    }

    pub fn pairwise_sq_dist(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.nrows();
        let mut d = Array2::zeros((n, n));
        for i in 0..n {
            for b in 0..n {
                let xi = x.row(i);
                let xb = x.row(b);
                d[[i, b]] = xi.iter().zip(xb.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
            }
        }
        self.push(d, Op::PairwiseSqDist(a.0))
    }

    /// Gradients of the scalar node `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        grads[out.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], i: usize, g: Array2<f64>) {
            match &mut grads[i] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value.t());
                    let gb = self.nodes[*a].value.t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * &self.nodes[*b].value);
                    acc(&mut grads, *b, &g * &self.nodes[*a].value);
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, r) => {
                    let gr = (&g * &self.nodes[*a].value).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *r, gr);
                    acc(&mut grads, *a, &g * &self.nodes[*r].value);
                }
                Op::AddCol(a, c) => {
                    acc(&mut grads, *c, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::MulCol(a, c) => {
                    let gc = (&g * &self.nodes[*a].value).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *c, gc);
                    acc(&mut grads, *a, &g * &self.nodes[*c].value);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &g * *k),
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::Silu(a) => {
                    let d = self.nodes[*a].value.mapv(silu_grad);
                    acc(&mut grads, *a, &g * &d);
                }
                Op::Tanh(a) => {
                    let d = node.value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, &g * &d);
                }
                Op::Exp(a) => acc(&mut grads, *a, &g * &node.value),
                Op::Log(a) => acc(&mut grads, *a, &g / &self.nodes[*a].value),
                Op::Square(a) => acc(&mut grads, *a, &g * &self.nodes[*a].value * 2.0),
                Op::SumAll(a) => {
                    let shape = self.nodes[*a].value.dim();
                    acc(&mut grads, *a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::MeanAll(a) => {
                    let x = &self.nodes[*a].value;
                    acc(&mut grads, *a, Array2::from_elem(x.dim(), g[[0, 0]] / x.len() as f64));
                }
                Op::SumCols(a) => {
                    let shape = self.nodes[*a].value.dim();
                    let ga = Array2::from_shape_fn(shape, |(r, _)| g[[r, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let shape = self.nodes[*a].value.dim();
                    let n = shape.0 as f64;
                    let ga = Array2::from_shape_fn(shape, |(_, c)| g[[0, c]] / n);
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, y * &(&g - &dot));
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let cols = y.ncols() as f64;
                    let mut ga = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gr.sum() / cols;
                        let mean_gy = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
                        for c in 0..y.ncols() {
                            ga[[r, c]] = inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.nodes[*p].value.ncols();
                        acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.nodes[*p].value.nrows();
                        acc(&mut grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.nodes[*a].value.dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.nodes[*a].value.dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Array2::zeros(self.nodes[*a].value.dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::CrossEntropy(a, targets, probs) => {
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut ga = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        ga[[r, t]] -= 1.0;
                    }
                    ga *= scale;
                    acc(&mut grads, *a, ga);
                }
                Op::PairwiseSqDist(a) => {
                    let x = &self.nodes[*a].value;
                    // d/dx_i of sum_{i,b} g_ib ||x_i - x_b||^2 = 2 sum_b (g_ib + g_bi)(x_i - x_b)
                    let sym = &g + &g.t();
                    let row_sums = sym.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = (x * &row_sums - sym.dot(x)) * 2.0;
                    acc(&mut grads, *a, ga);
                }
            }
        }

        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_softmax_layernorm_chain() {
        let x0 = array![[0.3, -1.2, 0.5], [1.1, 0.2, -0.7]];
        let w = array![[0.2, -0.4], [0.9, 0.1], [-0.3, 0.6]];
        let f = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let y = t.matmul(xv, wv);
            let y = t.layer_norm(y, 1e-5);
            let y = t.softmax_rows(y);
            let y = t.silu(y);
            let s = t.square(y);
            let out = t.sum(s);
            (t.scalar(out), t, xv, out)
        };
        let (_, tape, xv, out) = f(&x0);
        let g = tape.backward(out).get(xv);
        let n = numeric_grad(&x0, |x| f(x).0);
        assert_close(&g, &n, 1e-6);
    }

    #[test]
    fn pairwise_distance_gradient() {
        let x0 = array![[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]];
        let f = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let d = t.pairwise_sq_dist(xv);
            let d = t.scale(d, -1.0);
            let e = t.exp(d);
            let m = t.mean(e);
            let out = t.log(m);
            (t.scalar(out), t, xv, out)
        };
        let (_, tape, xv, out) = f(&x0);
        let g = tape.backward(out).get(xv);
        let n = numeric_grad(&x0, |x| f(x).0);
        assert_close(&g, &n, 1e-6);
    }

    #[test]
    fn gather_with_repeats_scatters_back() {
        let mut t = Tape::new();
        let table = t.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let g = t.gather_rows(table, &[1, 1, 0]);
        let out = t.sum(g);
        let grads = t.backward(out);
        assert_eq!(grads.get(table), array![[1.0, 1.0], [2.0, 2.0]]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let mut t = Tape::new();
        let logits = t.leaf(Array2::zeros((3, 10)));
        let ce = t.cross_entropy(logits, &[0, 4, 9]);
        assert!((t.scalar(ce) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unused_leaf_has_zero_grad() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0]]);
        let b = t.leaf(array![[2.0, 3.0]]);
        let out = t.square(a);
        let grads = t.backward(out);
        assert_eq!(grads.get(b), Array2::<f64>::zeros((1, 2)));
        assert_eq!(grads.get(a), array![[2.0]]);
    }
}
