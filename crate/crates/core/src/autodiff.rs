//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! Every operation evaluates eagerly, appends a node holding its output and
//! operand ids, and returns a [`Var`] handle. Operands always precede their
//! consumers, so [`Tape::gradients`] is one reverse sweep over the node list.
//!
//! ```
//! use survpath::autodiff::Tape;
//! use survpath::matrix::Matrix;
//! use survpath::param::ParamStore;
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", Matrix::from_rows(&[&[1.0, 2.0]])).unwrap();
//! let mut tape = Tape::new();
//! let wv = tape.param(&store, w);
//! let loss = tape.sum(wv);
//! tape.backward(loss, &mut store).unwrap();
//! assert_eq!(store.grad(w).data(), &[1.0, 1.0]);
//! ```

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::param::{ParamId, ParamStore};
use crate::rng::seeded;

/// Additive score used for masked softmax entries; behaves as −∞ without NaN.
pub const MASK_VALUE: f64 = -1e30;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Affine(usize, f64),
    Sigmoid(usize),
    Relu(usize),
    Silu(usize),
    Exp(usize),
    Log(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    MeanRows(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SelectCols(usize, Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    CumsumCols(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        normed: Matrix,
        inv_std: Vec<f64>,
    },
    Dropout(usize, Matrix),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    mode: Mode,
}

/// Adjoints of every node after a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.adj[v.0].as_ref()
    }

    /// Adjoint of `v`, or zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.adj[v.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_mode(mode: Mode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input whose gradient can be read from [`Gradients`].
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Record a parameter. Repeated calls for the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "add of {}x{} and {}x{}",
                x.rows(),
                x.cols(),
                y.rows(),
                y.cols()
            )));
        }
        let out = x.zip_map(y, |p, q| p + q);
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    /// Add a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::Shape(format!(
                "broadcast of {}x{} onto {}x{}",
                r.rows(),
                r.cols(),
                x.rows(),
                x.cols()
            )));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a.0, row.0)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "mul of {}x{} and {}x{}",
                x.rows(),
                x.cols(),
                y.rows(),
                y.cols()
            )));
        }
        let out = x.zip_map(y, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// `s · a + shift`.
    pub fn affine(&mut self, a: Var, s: f64, shift: f64) -> Var {
        let out = self.value(a).map(|v| s * v + shift);
        self.push(out, Op::Affine(a.0, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a.0))
    }

    /// Sigmoid-linear unit, `x · σ(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a.0))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(a.0, lo, hi))
    }

    /// Sum of all entries, as `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a.0))
    }

    /// Column means, as `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::Contract("mean over zero rows".into()));
        }
        let mut out = Matrix::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let n = x.rows() as f64;
        out.data_mut().iter_mut().for_each(|o| *o /= n);
        Ok(self.push(out, Op::MeanRows(a.0)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Matrix::concat_rows(&mats)?;
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|v| v.0).collect())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Matrix::concat_cols(&mats)?;
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|v| v.0).collect())))
    }

    /// Gather columns by index; the backward pass scatter-adds.
    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.cols()) {
            return Err(Error::Index {
                what: "columns",
                index: bad,
                len: x.cols(),
            });
        }
        let out = x.select_cols(idx);
        Ok(self.push(out, Op::SelectCols(a.0, idx.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice_rows(start, end);
        self.push(out, Op::SliceRows(a.0, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice_cols(start, end);
        self.push(out, Op::SliceCols(a.0, start))
    }

    /// Running sum along each row.
    pub fn cumsum_cols(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let mut acc = 0.0;
            for v in out.row_mut(r) {
                acc += *v;
                *v = acc;
            }
        }
        self.push(out, Op::CumsumCols(a.0))
    }

    /// Row-wise softmax. Masked entries (`mask[r * cols + c] == true`) get an
    /// additive [`MASK_VALUE`] before exponentiation and come out exactly 0.
    pub fn row_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = row_softmax(self.value(a), mask)?;
        Ok(self.push(out, Op::Softmax(a.0)))
    }

    /// Per-row normalization with `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xm = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let c = xm.cols();
        if g.shape() != (1, c) || b.shape() != (1, c) {
            return Err(Error::Shape(format!(
                "layer_norm gain {}x{} / bias {}x{} for width {c}",
                g.rows(),
                g.cols(),
                b.rows(),
                b.cols()
            )));
        }
        let mut normed = Matrix::zeros(xm.rows(), c);
        let mut out = Matrix::zeros(xm.rows(), c);
        let mut inv_std = Vec::with_capacity(xm.rows());
        for r in 0..xm.rows() {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let n = (row[j] - mean) * is;
                normed.set(r, j, n);
                out.set(r, j, n * g.data()[j] + b.data()[j]);
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                normed,
                inv_std,
            },
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)`. Identity
    /// outside [`Mode::Train`] or when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if self.mode != Mode::Train || rate == 0.0 {
            return Ok(a);
        }
        let x = self.value(a);
        let keep = 1.0 / (1.0 - rate);
        let mut rng = seeded(seed);
        let mask_data = (0..x.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let mask = Matrix::from_vec(x.rows(), x.cols(), mask_data)?;
        let out = x.zip_map(&mask, |v, m| v * m);
        Ok(self.push(out, Op::Dropout(a.0, mask)))
    }

    /// Reverse sweep from a `1 x 1` node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients {
            adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    /// Reverse sweep that also accumulates into each parameter's gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(id, g);
            }
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_bt(val(*b)).expect("matmul backward");
                let db = val(*a).matmul_at(g).expect("matmul backward");
                accumulate(adj, *a, da);
                accumulate(adj, *b, db);
            }
            Op::Transpose(a) => accumulate(adj, *a, g.transpose()),
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                accumulate(adj, *a, g.clone());
                let mut dr = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in dr.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(adj, *row, dr);
            }
            Op::Mul(a, b) => {
                accumulate(adj, *a, g.zip_map(val(*b), |x, y| x * y));
                accumulate(adj, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Affine(a, s) => accumulate(adj, *a, g.scale(*s)),
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y));
                accumulate(adj, *a, d);
            }
            Op::Relu(a) => {
                let d = g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                accumulate(adj, *a, d);
            }
            Op::Silu(a) => {
                let d = g.zip_map(val(*a), |gi, x| {
                    let s = sigmoid(x);
                    gi * (s + x * s * (1.0 - s))
                });
                accumulate(adj, *a, d);
            }
            Op::Exp(a) => accumulate(adj, *a, g.zip_map(&node.value, |gi, y| gi * y)),
            Op::Log(a) => accumulate(adj, *a, g.zip_map(val(*a), |gi, x| gi / x)),
            Op::Clamp(a, lo, hi) => {
                let d = g.zip_map(val(*a), |gi, x| if x >= *lo && x <= *hi { gi } else { 0.0 });
                accumulate(adj, *a, d);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                accumulate(adj, *a, Matrix::filled(r, c, g.item()));
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.data()) {
                        *o = v / r as f64;
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = val(p).rows();
                    accumulate(adj, p, g.slice_rows(start, start + n));
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = val(p).cols();
                    accumulate(adj, p, g.slice_cols(start, start + n));
                    start += n;
                }
            }
            Op::SelectCols(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for row in 0..r {
                    for (k, &src) in idx.iter().enumerate() {
                        let cur = d.get(row, src);
                        d.set(row, src, cur + g.get(row, k));
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for row in 0..g.rows() {
                    d.row_mut(start + row).copy_from_slice(g.row(row));
                }
                accumulate(adj, *a, d);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for row in 0..r {
                    d.row_mut(row)[*start..start + g.cols()].copy_from_slice(g.row(row));
                }
                accumulate(adj, *a, d);
            }
            Op::CumsumCols(a) => {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let mut acc = 0.0;
                    for v in d.row_mut(r).iter_mut().rev() {
                        acc += *v;
                        *v = acc;
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                    for ((o, gi), yi) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yi * (gi - dot);
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let gv = val(*gain);
                let (rows, c) = normed.shape();
                let mut dgain = Matrix::zeros(1, c);
                let mut dbias = Matrix::zeros(1, c);
                let mut dx = Matrix::zeros(rows, c);
                for r in 0..rows {
                    let gr = g.row(r);
                    let nr = normed.row(r);
                    let mut sum_dn = 0.0;
                    let mut sum_dn_n = 0.0;
                    for j in 0..c {
                        dgain.data_mut()[j] += gr[j] * nr[j];
                        dbias.data_mut()[j] += gr[j];
                        let dn = gr[j] * gv.data()[j];
                        sum_dn += dn;
                        sum_dn_n += dn * nr[j];
                    }
                    let scale = inv_std[r] / c as f64;
                    for j in 0..c {
                        let dn = gr[j] * gv.data()[j];
                        dx.set(r, j, scale * (c as f64 * dn - sum_dn - nr[j] * sum_dn_n));
                    }
                }
                accumulate(adj, *x, dx);
                accumulate(adj, *gain, dgain);
                accumulate(adj, *bias, dbias);
            }
            Op::Dropout(a, mask) => accumulate(adj, *a, g.zip_map(mask, |gi, m| gi * m)),
        }
    }
}

fn accumulate(adj: &mut [Option<Matrix>], i: usize, g: Matrix) {
    match &mut adj[i] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Forward softmax shared by the tape op and non-recording callers.
pub fn row_softmax(x: &Matrix, mask: Option<&[bool]>) -> Result<Matrix> {
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(Error::Shape(format!(
                "softmax mask of length {} for {}x{} input",
                m.len(),
                x.rows(),
                x.cols()
            )));
        }
    }
    let c = x.cols();
    let mut out = Matrix::zeros(x.rows(), c);
    for r in 0..x.rows() {
        let masked = |j: usize| mask.is_some_and(|m| m[r * c + j]);
        let shifted: Vec<f64> = (0..c)
            .map(|j| x.get(r, j) + if masked(j) { MASK_VALUE } else { 0.0 })
            .collect();
        if (0..c).all(masked) {
            return Err(Error::DegenerateRow(r));
        }
        let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..c {
            let e = if masked(j) {
                0.0
            } else {
                (shifted[j] - max).exp()
            };
            out.set(r, j, e);
            total += e;
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}
