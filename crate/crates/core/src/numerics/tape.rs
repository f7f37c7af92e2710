//! Recorded-operation reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only arena of nodes. Every op evaluates its
//! forward value eagerly, checks it is finite, and records enough state to
//! run its backward rule later. Node ids are handed out as [`Var`] handles,
//! which are `Copy` and only meaningful for the tape that produced them.
//!
//! Because nodes are appended in evaluation order the arena is already
//! topologically sorted, so [`Tape::backward`] is a single reverse sweep.

// Index loops below mirror the per-element formulas.
#![allow(clippy::needless_range_loop)]

use rand::Rng;

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use super::NumericsError;

/// Lower bound applied to the argument of `log`.
pub const LOG_GUARD: f64 = 1e-12;
/// Variance epsilon of layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulCol(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Tensor,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    CosineMatrix(Var, Var),
    SqDist(Var, Var),
    Aggregate(Var, Vec<(usize, usize, f64)>),
    Pick(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes.get(v.0).copied().unwrap_or([0, 0]);
                Tensor::zeros(r, c)
            }
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => {
                let [r, c] = self.shapes.get(v.0).copied().unwrap_or([0, 0]);
                Tensor::zeros(r, c)
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

type Res = Result<Var, NumericsError>;

fn mismatch(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

fn shape_str(t: &Tensor) -> String {
    format!("{}x{}", t.rows(), t.cols())
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

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Res {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Parameters and constants are both leaves.
    pub fn leaf(&mut self, value: Tensor) -> Res {
        self.push("leaf", value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Res {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(mismatch("matmul", format!("{} * {}", shape_str(av), shape_str(bv))));
        }
        let mut out = Tensor::zeros(av.rows(), bv.cols());
        matmul_into(av, bv, &mut out);
        self.push("matmul", out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Res {
        let out = self.value(x).transpose();
        self.push("transpose", out, Op::Transpose(x))
    }

    fn zip_same(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(mismatch(name, format!("{} vs {}", shape_str(av), shape_str(bv))));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.rows(), av.cols(), data)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::new(xv.rows(), xv.cols(), xv.data().iter().map(|v| f(*v)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Res {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Res {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Res {
        let out = self.map(x, |v| v * s);
        self.push("scale", out, Op::Scale(x, s))
    }

    /// `x (n x d) + b (1 x d)`, broadcasting `b` over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Res {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(mismatch("add_row", format!("{} + {}", shape_str(xv), shape_str(bv))));
        }
        let out = Tensor::from_fn(xv.rows(), xv.cols(), |r, c| xv.get(r, c) + bv.get(0, c));
        self.push("add_row", out, Op::AddRow(x, b))
    }

    /// `x (n x d)` with row `r` scaled by `g[r]` for `g (n x 1)`.
    pub fn mul_col(&mut self, x: Var, g: Var) -> Res {
        let (xv, gv) = (self.value(x), self.value(g));
        if gv.cols() != 1 || gv.rows() != xv.rows() {
            return Err(mismatch("mul_col", format!("{} * {}", shape_str(xv), shape_str(gv))));
        }
        let out = Tensor::from_fn(xv.rows(), xv.cols(), |r, c| xv.get(r, c) * gv.get(r, 0));
        self.push("mul_col", out, Op::MulCol(x, g))
    }

    /// Concatenation along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Res {
        let rows = parts.first().map_or(0, |p| self.value(*p).rows());
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(mismatch("concat_cols", "row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let dst = out.row_slice_mut(r);
            let mut off = 0;
            for p in parts {
                let src = self.nodes[p.0].value.row_slice(r);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    /// Stacks tensors vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Res {
        let cols = parts.first().map_or(0, |p| self.value(*p).cols());
        if parts.iter().any(|p| self.value(*p).cols() != cols) {
            return Err(mismatch("concat_rows", "column counts differ".into()));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor::new(if cols == 0 { 0 } else { rows }, cols, data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()))
    }

    /// Row gather; doubles as embedding lookup.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Res {
        let xv = self.value(x);
        if let Some(bad) = index.iter().find(|&&i| i >= xv.rows()) {
            return Err(mismatch("gather_rows", format!("row {bad} of {}", shape_str(xv))));
        }
        let mut out = Tensor::zeros(index.len(), xv.cols());
        for (r, &i) in index.iter().enumerate() {
            out.row_slice_mut(r).copy_from_slice(xv.row_slice(i));
        }
        self.push("gather_rows", out, Op::GatherRows(x, index.to_vec()))
    }

    /// Mean over the rows selected by `mask` (`None` selects all), `1 x d`.
    pub fn mean_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Res {
        let xv = self.value(x);
        let rows: Vec<usize> = match mask {
            Some(m) => {
                if m.len() != xv.rows() {
                    return Err(mismatch("mean_rows", format!("mask of {} for {}", m.len(), shape_str(xv))));
                }
                (0..xv.rows()).filter(|&r| m[r]).collect()
            }
            None => (0..xv.rows()).collect(),
        };
        if rows.is_empty() {
            return Err(NumericsError::EmptyReduction { op: "mean_rows" });
        }
        let mut out = Tensor::zeros(1, xv.cols());
        for &r in &rows {
            for (o, v) in out.row_slice_mut(0).iter_mut().zip(xv.row_slice(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        out.data_mut().iter_mut().for_each(|v| *v *= inv);
        self.push("mean_rows", out, Op::MeanRows(x, rows))
    }

    pub fn sum_all(&mut self, x: Var) -> Res {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum_all", out, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Res {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(NumericsError::EmptyReduction { op: "mean_all" });
        }
        let out = Tensor::scalar(xv.sum() / xv.len() as f64);
        self.push("mean_all", out, Op::MeanAll(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Res {
        let out = self.map(x, sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Res {
        let out = self.map(x, |v| v.max(0.0));
        self.push("relu", out, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Res {
        let out = self.map(x, f64::exp);
        self.push("exp", out, Op::Exp(x))
    }

    /// Natural log with the argument clamped below at [`LOG_GUARD`].
    pub fn log(&mut self, x: Var) -> Res {
        let out = self.map(x, |v| v.max(LOG_GUARD).ln());
        self.push("log", out, Op::Log(x))
    }

    /// Row-wise max-subtracted softmax.
    pub fn softmax(&mut self, x: Var) -> Res {
        self.softmax_masked(x, None)
    }

    /// Row-wise softmax restricted to entries where `mask` is true. Masked
    /// entries come out exactly zero; a row with no admissible entry is all
    /// zeros.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Res {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.len() != xv.len() {
                return Err(mismatch("softmax", format!("mask of {} for {}", m.len(), shape_str(xv))));
            }
        }
        let mut out = Tensor::zeros(xv.rows(), xv.cols());
        let cols = xv.cols();
        for r in 0..xv.rows() {
            let keep = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
            let row = xv.row_slice(r);
            let max = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let dst = out.row_slice_mut(r);
            let mut total = 0.0;
            for c in 0..cols {
                if keep(c) {
                    dst[c] = (row[c] - max).exp();
                    total += dst[c];
                }
            }
            dst.iter_mut().for_each(|v| *v /= total);
        }
        self.push("softmax", out, Op::Softmax(x))
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax(&mut self, x: Var) -> Res {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let row = xv.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in out.row_slice_mut(r).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.push("log_softmax", out, Op::LogSoftmax(x))
    }

    /// Layer normalization over the last axis with learned `gain` and `bias`
    /// (both `1 x d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Res {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.shape() != [1, d] || bv.shape() != [1, d] {
            return Err(mismatch(
                "layer_norm",
                format!("{} with gain {} bias {}", shape_str(xv), shape_str(gv), shape_str(bv)),
            ));
        }
        let mut normed = Tensor::zeros(xv.rows(), d);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row_slice(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in normed.row_slice_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::from_fn(xv.rows(), d, |r, c| normed.get(r, c) * gv.get(0, c) + bv.get(0, c));
        self.push("layer_norm", out, Op::LayerNorm { x, gain, bias, normed, inv_std })
    }

    /// Inverted dropout. With `rng == None` (evaluation) or `p == 0` this is
    /// the identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Res {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::InvalidArgument(format!("dropout probability {p}")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(xv.rows(), xv.cols(), data)?;
        self.push("dropout", out, Op::Dropout(x, mask))
    }

    /// `out[i][j] = cos(a_i, b_j)` for `a (m x d)`, `b (k x d)`. Rows must be
    /// nonzero.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Res {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(mismatch("cosine", format!("{} vs {}", shape_str(av), shape_str(bv))));
        }
        let an = row_norms(av);
        let bn = row_norms(bv);
        if an.iter().chain(&bn).any(|&n| n == 0.0) {
            return Err(NumericsError::ZeroNorm { op: "cosine" });
        }
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        matmul_nt_into(av, bv, &mut out);
        for i in 0..av.rows() {
            for j in 0..bv.rows() {
                let v = out.get(i, j) / (an[i] * bn[j]);
                out.set(i, j, v);
            }
        }
        self.push("cosine", out, Op::CosineMatrix(a, b))
    }

    /// Pairwise squared euclidean distances, `m x k`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Res {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(mismatch("sq_dist", format!("{} vs {}", shape_str(av), shape_str(bv))));
        }
        let out = Tensor::from_fn(av.rows(), bv.rows(), |i, j| {
            av.row_slice(i)
                .iter()
                .zip(bv.row_slice(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum()
        });
        self.push("sq_dist", out, Op::SqDist(a, b))
    }

    /// Sparse weighted aggregation: `out[dst] += w * x[src]` for every
    /// `(dst, src, w)` edge; the output has `rows` rows.
    pub fn aggregate(&mut self, x: Var, edges: &[(usize, usize, f64)], rows: usize) -> Res {
        let xv = self.value(x);
        if let Some(e) = edges.iter().find(|e| e.0 >= rows || e.1 >= xv.rows()) {
            return Err(mismatch("aggregate", format!("edge {:?} for {} -> {rows} rows", e, shape_str(xv))));
        }
        let mut out = Tensor::zeros(rows, xv.cols());
        for &(dst, src, w) in edges {
            let src_row = xv.row_slice(src);
            for (o, v) in out.row_slice_mut(dst).iter_mut().zip(src_row) {
                *o += w * v;
            }
        }
        self.push("aggregate", out, Op::Aggregate(x, edges.to_vec()))
    }

    /// `out[r] = x[r][index[r]]`, an `n x 1` column.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Res {
        let xv = self.value(x);
        if index.len() != xv.rows() || index.iter().any(|&c| c >= xv.cols()) {
            return Err(mismatch("pick", format!("{} indices into {}", index.len(), shape_str(xv))));
        }
        let out = Tensor::from_fn(xv.rows(), 1, |r, _| xv.get(r, index[r]));
        self.push("pick", out, Op::Pick(x, index.to_vec()))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(NumericsError::NonScalarLoss { shape });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..n).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let shapes = self.nodes[..n].iter().map(|node| node.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        let value = &self.nodes[v.0].value;
        grads[v.0].get_or_insert_with(|| Tensor::zeros(value.rows(), value.cols()))
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                matmul_nt_into(g, bv, self.slot(grads, *a));
                matmul_tn_into(av, g, self.slot(grads, *b));
            }
            Op::Transpose(x) => self.slot(grads, *x).add_assign(&g.transpose()),
            Op::Add(a, b) => {
                self.slot(grads, *a).add_assign(g);
                self.slot(grads, *b).add_assign(g);
            }
            Op::Sub(a, b) => {
                self.slot(grads, *a).add_assign(g);
                let gb = self.slot(grads, *b);
                for (o, v) in gb.data_mut().iter_mut().zip(g.data()) {
                    *o -= v;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                let ga = self.slot(grads, *a);
                for ((o, gv), y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                    *o += gv * y;
                }
                let gb = self.slot(grads, *b);
                for ((o, gv), x) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *o += gv * x;
                }
            }
            Op::Scale(x, s) => {
                let gx = self.slot(grads, *x);
                for (o, v) in gx.data_mut().iter_mut().zip(g.data()) {
                    *o += s * v;
                }
            }
            Op::AddRow(x, b) => {
                self.slot(grads, *x).add_assign(g);
                let gb = self.slot(grads, *b);
                for r in 0..g.rows() {
                    for (o, v) in gb.data_mut().iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
            }
            Op::MulCol(x, gate) => {
                let (xv, gatev) = (self.value(*x), self.value(*gate));
                {
                    let gx = self.slot(grads, *x);
                    for r in 0..g.rows() {
                        let s = gatev.get(r, 0);
                        for (o, v) in gx.row_slice_mut(r).iter_mut().zip(g.row_slice(r)) {
                            *o += s * v;
                        }
                    }
                }
                let ggate = self.slot(grads, *gate);
                for r in 0..g.rows() {
                    let dot: f64 = g.row_slice(r).iter().zip(xv.row_slice(r)).map(|(a, b)| a * b).sum();
                    ggate.data_mut()[r] += dot;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let gp = self.slot(grads, *p);
                    let w = gp.cols();
                    for r in 0..g.rows() {
                        for (o, v) in gp.row_slice_mut(r).iter_mut().zip(&g.row_slice(r)[off..off + w]) {
                            *o += v;
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let gp = self.slot(grads, *p);
                    let len = gp.len();
                    for (o, v) in gp.data_mut().iter_mut().zip(&g.data()[off..off + len]) {
                        *o += v;
                    }
                    off += len;
                }
            }
            Op::GatherRows(x, index) => {
                let gx = self.slot(grads, *x);
                for (r, &src) in index.iter().enumerate() {
                    for (o, v) in gx.row_slice_mut(src).iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
            }
            Op::MeanRows(x, rows) => {
                let inv = 1.0 / rows.len() as f64;
                let gx = self.slot(grads, *x);
                for &r in rows {
                    for (o, v) in gx.row_slice_mut(r).iter_mut().zip(g.row_slice(0)) {
                        *o += v * inv;
                    }
                }
            }
            Op::SumAll(x) => {
                let s = g.item();
                self.slot(grads, *x).data_mut().iter_mut().for_each(|o| *o += s);
            }
            Op::MeanAll(x) => {
                let gx = self.slot(grads, *x);
                let s = g.item() / gx.len() as f64;
                gx.data_mut().iter_mut().for_each(|o| *o += s);
            }
            Op::Sigmoid(x) => {
                let gx = self.slot(grads, *x);
                for ((o, gv), y) in gx.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *o += gv * y * (1.0 - y);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = self.slot(grads, *x);
                for ((o, gv), v) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    if *v > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Exp(x) => {
                let gx = self.slot(grads, *x);
                for ((o, gv), y) in gx.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *o += gv * y;
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let gx = self.slot(grads, *x);
                for ((o, gv), v) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    if *v > LOG_GUARD {
                        *o += gv / v;
                    }
                }
            }
            Op::Softmax(x) => {
                let gx = self.slot(grads, *x);
                for r in 0..g.rows() {
                    let y = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in gx.row_slice_mut(r).iter_mut().zip(y).zip(gr) {
                        *o += yv * (gv - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let gx = self.slot(grads, *x);
                for r in 0..g.rows() {
                    let y = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let total: f64 = gr.iter().sum();
                    for ((o, yv), gv) in gx.row_slice_mut(r).iter_mut().zip(y).zip(gr) {
                        *o += gv - yv.exp() * total;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                let gainv = self.value(*gain).clone();
                let d = g.cols();
                {
                    let gg = self.slot(grads, *gain);
                    for r in 0..g.rows() {
                        for c in 0..d {
                            gg.data_mut()[c] += g.get(r, c) * normed.get(r, c);
                        }
                    }
                }
                {
                    let gb = self.slot(grads, *bias);
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row_slice(r)) {
                            *o += v;
                        }
                    }
                }
                let gx = self.slot(grads, *x);
                let mut dn = vec![0.0; d];
                for r in 0..g.rows() {
                    let nr = normed.row_slice(r);
                    for c in 0..d {
                        dn[c] = g.get(r, c) * gainv.get(0, c);
                    }
                    let sum_dn: f64 = dn.iter().sum();
                    let sum_dn_n: f64 = dn.iter().zip(nr).map(|(a, b)| a * b).sum();
                    let scale = inv_std[r] / d as f64;
                    for (c, o) in gx.row_slice_mut(r).iter_mut().enumerate() {
                        *o += scale * (d as f64 * dn[c] - sum_dn - nr[c] * sum_dn_n);
                    }
                }
            }
            Op::Dropout(x, mask) => {
                let gx = self.slot(grads, *x);
                for ((o, gv), m) in gx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                    *o += gv * m;
                }
            }
            Op::CosineMatrix(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                let an = row_norms(&av);
                let bn = row_norms(&bv);
                {
                    let ga = self.slot(grads, *a);
                    for i in 0..av.rows() {
                        for j in 0..bv.rows() {
                            let gij = g.get(i, j);
                            if gij == 0.0 {
                                continue;
                            }
                            let c = out.get(i, j);
                            let inv_ab = 1.0 / (an[i] * bn[j]);
                            let inv_aa = c / (an[i] * an[i]);
                            for (k, o) in ga.row_slice_mut(i).iter_mut().enumerate() {
                                *o += gij * (bv.get(j, k) * inv_ab - av.get(i, k) * inv_aa);
                            }
                        }
                    }
                }
                let gb = self.slot(grads, *b);
                for j in 0..bv.rows() {
                    for i in 0..av.rows() {
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        let c = out.get(i, j);
                        let inv_ab = 1.0 / (an[i] * bn[j]);
                        let inv_bb = c / (bn[j] * bn[j]);
                        for (k, o) in gb.row_slice_mut(j).iter_mut().enumerate() {
                            *o += gij * (av.get(i, k) * inv_ab - bv.get(j, k) * inv_bb);
                        }
                    }
                }
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                let d = av.cols();
                let mut da = Tensor::zeros(av.rows(), d);
                let mut db = Tensor::zeros(bv.rows(), d);
                for i in 0..av.rows() {
                    for j in 0..bv.rows() {
                        let s = 2.0 * g.get(i, j);
                        if s == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = s * (av.get(i, k) - bv.get(j, k));
                            da.data_mut()[i * d + k] += diff;
                            db.data_mut()[j * d + k] -= diff;
                        }
                    }
                }
                self.slot(grads, *a).add_assign(&da);
                self.slot(grads, *b).add_assign(&db);
            }
            Op::Aggregate(x, edges) => {
                let gx = self.slot(grads, *x);
                for &(dst, src, w) in edges {
                    for (o, v) in gx.row_slice_mut(src).iter_mut().zip(g.row_slice(dst)) {
                        *o += w * v;
                    }
                }
            }
            Op::Pick(x, index) => {
                let gx = self.slot(grads, *x);
                for (r, &c) in index.iter().enumerate() {
                    let v = gx.get(r, c) + g.get(r, 0);
                    gx.set(r, c, v);
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows())
        .map(|r| t.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}
