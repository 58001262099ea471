use super::tensor::{dot, Tensor};
use super::EPS_NORM;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x + b` with `b` a `1 × cols` row broadcast over every row of `x`.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Cos(Var),
    Sin(Var),
    /// `ln(max(x, eps))`
    Log(Var, f64),
    Recip(Var),
    Clamp(Var, f64, f64),
    GradReversal(Var, f64),
    Transpose(Var),
    NormalizeRows(Var),
    SoftmaxRows(Var),
    RowSumNormalize(Var),
    PairwiseSqDist(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GroupMeanRows(Var, Vec<Vec<usize>>),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<(usize, usize)>),
    /// `out[u][f·L + l] = coeffs[l]·x[u][f] + offsets[l]` with `L = coeffs.len()`.
    ExpandAffine(Var, Vec<f64>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records tensor operations eagerly and replays them backward.
///
/// Nodes are appended in creation order, so reverse index order is a reverse
/// topological order. Shape mismatches inside the tape are programming errors
/// and panic; public entry points validate shapes before recording.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros of the right shape when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b)).expect("tape matmul shape");
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape("add", a, b);
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape("sub", a, b);
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape("mul", a, b);
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        assert!(bs.0 == 1 && bs.1 == xs.1, "add_row: {xs:?} + {bs:?}");
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for r in 0..xs.0 {
            for (o, bb) in v.row_mut(r).iter_mut().zip(&b) {
                *o += bb;
            }
        }
        self.push(v, Op::AddRow(x, bias))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).scale(k);
        self.push(v, Op::Scale(x, k))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).map(|a| a + k);
        self.push(v, Op::AddScalar(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { slope * a });
        self.push(v, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(super::sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::cos);
        self.push(v, Op::Cos(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::sin);
        self.push(v, Op::Sin(x))
    }

    /// Natural log with the input clamped below at `eps`; no gradient flows through the clamp.
    pub fn log_clamped(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x).map(|a| a.max(eps).ln());
        self.push(v, Op::Log(x, eps))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| 1.0 / a);
        self.push(v, Op::Recip(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).map(|a| a.clamp(lo, hi));
        self.push(v, Op::Clamp(x, lo, hi))
    }

    /// Identity forward; multiplies the upstream adjoint by `-lambda` backward.
    pub fn grad_reversal(&mut self, x: Var, lambda: f64) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::GradReversal(x, lambda))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x))
    }

    /// L2-normalizes every row.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let n = dot(row, row).sqrt().max(EPS_NORM);
            row.iter_mut().for_each(|a| *a /= n);
        }
        self.push(v, Op::NormalizeRows(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            let p = super::softmax(v.row(r));
            v.row_mut(r).copy_from_slice(&p);
        }
        self.push(v, Op::SoftmaxRows(x))
    }

    /// Divides every row by its sum (rows must have a nonzero sum).
    pub fn row_sum_normalize(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|a| *a /= s);
        }
        self.push(v, Op::RowSumNormalize(x))
    }

    /// `out[i][j] = ‖x_i − x_j‖²` over the rows of `x`.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.rows();
        let v = Tensor::from_fn(m, m, |i, j| {
            xv.row(i)
                .iter()
                .zip(xv.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        });
        self.push(v, Op::PairwiseSqDist(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(x))
    }

    /// Column-wise mean as a `1 × cols` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).mean_rows();
        self.push(v, Op::MeanRows(x))
    }

    /// Row `k` of the output is the mean of the rows of `x` listed in `groups[k]`.
    pub fn group_mean_rows(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let mut v = Tensor::zeros(groups.len(), xv.cols());
        for (k, g) in groups.iter().enumerate() {
            assert!(!g.is_empty(), "group_mean_rows: empty group {k}");
            let out = v.row_mut(k);
            for &r in g {
                for (o, a) in out.iter_mut().zip(xv.row(r)) {
                    *o += a;
                }
            }
            let n = g.len() as f64;
            out.iter_mut().for_each(|o| *o /= n);
        }
        self.push(v, Op::GroupMeanRows(x, groups))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let v = self.value(x).select_rows(&idx);
        self.push(v, Op::GatherRows(x, idx))
    }

    /// Gathers single entries into an `n × 1` column.
    pub fn pick(&mut self, x: Var, entries: Vec<(usize, usize)>) -> Var {
        let xv = self.value(x);
        let data = entries.iter().map(|&(r, c)| xv.get(r, c)).collect();
        let v = Tensor::from_vec(entries.len(), 1, data).expect("pick shape");
        self.push(v, Op::Pick(x, entries))
    }

    /// Replaces every entry `x[u][f]` by the `L` values `coeffs[l]·x[u][f] + offsets[l]`,
    /// laid out contiguously, giving a `rows × cols·L` result.
    pub fn expand_affine(&mut self, x: Var, coeffs: Vec<f64>, offsets: Vec<f64>) -> Var {
        assert_eq!(coeffs.len(), offsets.len(), "expand_affine: coefficient/offset length");
        let xv = self.value(x);
        let l = coeffs.len();
        let v = Tensor::from_fn(xv.rows(), xv.cols() * l, |u, c| {
            coeffs[c % l] * xv.get(u, c / l) + offsets[c % l]
        });
        self.push(v, Op::ExpandAffine(x, coeffs))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::vstack(&vals).expect("concat_rows shape");
        self.push(v, Op::ConcatRows(parts))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in &parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        self.push(v, Op::ConcatCols(parts))
    }

    fn assert_same_shape(&self, what: &str, a: Var, b: Var) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a 1x1 loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }

        adj.resize(self.nodes.len(), None);
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(adj, *a, g.matmul_t(bv).expect("matmul adjoint"));
                accumulate(adj, *b, av.t_matmul(g).expect("matmul adjoint"));
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(adj, *a, g.zip_map(bv, |u, w| u * w));
                accumulate(adj, *b, g.zip_map(av, |u, w| u * w));
            }
            Op::AddRow(x, b) => {
                accumulate(adj, *x, g.clone());
                let mut gb = vec![0.0; g.cols()];
                for r in g.row_iter() {
                    for (o, v) in gb.iter_mut().zip(r) {
                        *o += v;
                    }
                }
                accumulate(adj, *b, Tensor::row_vector(gb));
            }
            Op::Scale(x, k) => accumulate(adj, *x, g.scale(*k)),
            Op::AddScalar(x) => accumulate(adj, *x, g.clone()),
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                accumulate(adj, *x, g.zip_map(xv, |u, a| if a > 0.0 { u } else { slope * u }));
            }
            Op::Sigmoid(x) => accumulate(adj, *x, g.zip_map(y, |u, s| u * s * (1.0 - s))),
            Op::Cos(x) => {
                let xv = self.value(*x);
                accumulate(adj, *x, g.zip_map(xv, |u, a| -u * a.sin()));
            }
            Op::Sin(x) => {
                let xv = self.value(*x);
                accumulate(adj, *x, g.zip_map(xv, |u, a| u * a.cos()));
            }
            Op::Log(x, eps) => {
                let xv = self.value(*x);
                accumulate(adj, *x, g.zip_map(xv, |u, a| if a > *eps { u / a } else { 0.0 }));
            }
            Op::Recip(x) => accumulate(adj, *x, g.zip_map(y, |u, r| -u * r * r)),
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x);
                accumulate(
                    adj,
                    *x,
                    g.zip_map(xv, |u, a| if a >= *lo && a <= *hi { u } else { 0.0 }),
                );
            }
            Op::GradReversal(x, lambda) => accumulate(adj, *x, g.scale(-lambda)),
            Op::Transpose(x) => accumulate(adj, *x, g.transpose()),
            Op::NormalizeRows(x) => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let n = dot(xv.row(r), xv.row(r)).sqrt().max(EPS_NORM);
                    let (yr, gr) = (y.row(r), g.row(r));
                    let proj = dot(yr, gr);
                    for ((o, &yy), &gg) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gg - yy * proj) / n;
                    }
                }
                accumulate(adj, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = dot(yr, gr);
                    for ((o, &yy), &gg) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yy * (gg - s);
                    }
                }
                accumulate(adj, *x, gx);
            }
            Op::RowSumNormalize(x) => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s: f64 = xv.row(r).iter().sum();
                    let (yr, gr) = (y.row(r), g.row(r));
                    let c = dot(yr, gr);
                    for (o, &gg) in gx.row_mut(r).iter_mut().zip(gr) {
                        *o = (gg - c) / s;
                    }
                }
                accumulate(adj, *x, gx);
            }
            Op::PairwiseSqDist(x) => {
                let xv = self.value(*x);
                let m = xv.rows();
                let mut gx = Tensor::zeros(m, xv.cols());
                for i in 0..m {
                    for j in 0..m {
                        let w = 2.0 * (g.get(i, j) + g.get(j, i));
                        if w == 0.0 || i == j {
                            continue;
                        }
                        let (xi, xj) = (xv.row(i), xv.row(j));
                        for ((o, a), b) in gx.row_mut(i).iter_mut().zip(xi).zip(xj) {
                            *o += w * (a - b);
                        }
                    }
                }
                accumulate(adj, *x, gx);
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                accumulate(adj, *x, Tensor::filled(r, c, g.data()[0]));
            }
            Op::Mean(x) => {
                let (r, c) = self.shape(*x);
                accumulate(adj, *x, Tensor::filled(r, c, g.data()[0] / (r * c) as f64));
            }
            Op::MeanRows(x) => {
                let (r, c) = self.shape(*x);
                let n = r as f64;
                accumulate(adj, *x, Tensor::from_fn(r, c, |_, j| g.get(0, j) / n));
            }
            Op::GroupMeanRows(x, groups) => {
                let (r, c) = self.shape(*x);
                let mut gx = Tensor::zeros(r, c);
                for (k, grp) in groups.iter().enumerate() {
                    let n = grp.len() as f64;
                    for &row in grp {
                        for (o, gg) in gx.row_mut(row).iter_mut().zip(g.row(k)) {
                            *o += gg / n;
                        }
                    }
                }
                accumulate(adj, *x, gx);
            }
            Op::GatherRows(x, idx) => {
                let (r, c) = self.shape(*x);
                let mut gx = Tensor::zeros(r, c);
                for (t, &row) in idx.iter().enumerate() {
                    for (o, gg) in gx.row_mut(row).iter_mut().zip(g.row(t)) {
                        *o += gg;
                    }
                }
                accumulate(adj, *x, gx);
            }
            Op::Pick(x, entries) => {
                let (r, c) = self.shape(*x);
                let mut gx = Tensor::zeros(r, c);
                for (t, &(row, col)) in entries.iter().enumerate() {
                    let cur = gx.get(row, col);
                    gx.set(row, col, cur + g.get(t, 0));
                }
                accumulate(adj, *x, gx);
            }
            Op::ExpandAffine(x, coeffs) => {
                let (r, c) = self.shape(*x);
                let l = coeffs.len();
                let gx = Tensor::from_fn(r, c, |u, f| {
                    let gr = &g.row(u)[f * l..(f + 1) * l];
                    dot(gr, coeffs)
                });
                accumulate(adj, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, _) = self.shape(p);
                    let idx: Vec<usize> = (off..off + r).collect();
                    accumulate(adj, p, g.select_rows(&idx));
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (_, c) = self.shape(p);
                    let idx: Vec<usize> = (off..off + c).collect();
                    accumulate(adj, p, g.select_cols(&idx));
                    off += c;
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
