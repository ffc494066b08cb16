use std::sync::Arc;

use super::params::ParamStore;
use super::tensor::{dot, Tensor};
use crate::error::{DspError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Ragged index sets in compressed form: set `i` is `items[offsets[i]..offsets[i + 1]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSets {
    offsets: Vec<usize>,
    items: Vec<usize>,
}

impl IndexSets {
    pub fn from_sets<I, S>(sets: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = usize>,
    {
        let mut offsets = vec![0];
        let mut items = Vec::new();
        for s in sets {
            items.extend(s);
            offsets.push(items.len());
        }
        IndexSets { offsets, items }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn set(&self, i: usize) -> &[usize] {
        &self.items[self.offsets[i]..self.offsets[i + 1]]
    }

    fn max_item(&self) -> Option<usize> {
        self.items.iter().copied().max()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Arc<Vec<f64>>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    LayerNorm(Var, Vec<f64>),
    SoftmaxRows(Var),
    SegmentSoftmax(Var, Arc<Vec<usize>>),
    SegmentMax(Var, Vec<usize>),
    Gather(Var, Arc<Vec<Option<usize>>>),
    ScatterSum(Var, Arc<Vec<usize>>),
    SpMM(Var, Arc<Vec<(usize, usize)>>),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SmoothL1(Var, Arc<Tensor>, Reduction),
    Focal(Var, Arc<Vec<f64>>, FocalParams),
}

/// Focal-loss hyper-parameters; `n_pos` is the divisor, already clamped to at least 1.
#[derive(Debug, Clone, Copy)]
struct FocalParams {
    alpha: f64,
    beta: f64,
    n_pos: f64,
}

const FOCAL_CLAMP: f64 = 1e-12;
const NO_ARGMAX: usize = usize::MAX;

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation; reverse traversal yields gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn check_shape(op: &'static str, ok: bool, detail: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(DspError::shape(op, detail()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(DspError::NonFiniteValue(format!("output of {name}")));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is propagated past it.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Differentiable input whose gradient can be read from [`Grads`].
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push("input", t, Op::Leaf, true)
    }

    /// Records the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        self.push("param", store.value_by_id(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_shape("matmul", ta.cols == tb.rows, || format!("{:?} x {:?}", ta.shape(), tb.shape()))?;
        let v = ta.matmul(tb);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", v, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_shape("matmul_nt", ta.cols == tb.cols, || format!("{:?} x {:?}^T", ta.shape(), tb.shape()))?;
        let v = ta.matmul_nt(tb);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul_nt", v, Op::MatMulNT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        self.push("transpose", v, Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check_shape(op, sa == sb, || format!("{sa:?} vs {sb:?}"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push("add", v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let mut v = self.value(a).clone();
        for (x, y) in v.data.iter_mut().zip(&self.value(b).data) {
            *x -= y;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", v, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut v = self.value(a).clone();
        for (x, y) in v.data.iter_mut().zip(&self.value(b).data) {
            *x *= y;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", v, Op::Mul(a, b), rg)
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        check_shape("add_row", tb.rows == 1 && tb.cols == tx.cols, || {
            format!("{:?} + row {:?}", tx.shape(), tb.shape())
        })?;
        let mut v = tx.clone();
        for r in 0..v.rows {
            for (o, bb) in v.row_mut(r).iter_mut().zip(&tb.data) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push("add_row", v, Op::AddRow(x, b), rg)
    }

    /// Multiplies every row of `x` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(g));
        check_shape("mul_row", tg.rows == 1 && tg.cols == tx.cols, || {
            format!("{:?} * row {:?}", tx.shape(), tg.shape())
        })?;
        let mut v = tx.clone();
        for r in 0..v.rows {
            for (o, gg) in v.row_mut(r).iter_mut().zip(&tg.data) {
                *o *= gg;
            }
        }
        let rg = self.rg(x) || self.rg(g);
        self.push("mul_row", v, Op::MulRow(x, g), rg)
    }

    /// Multiplies row `i` of `x` by `s[i]`, with `s` an `n x 1` column.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        check_shape("mul_col", ts.cols == 1 && ts.rows == tx.rows, || {
            format!("{:?} * col {:?}", tx.shape(), ts.shape())
        })?;
        let mut v = tx.clone();
        for r in 0..v.rows {
            let f = ts.data[r];
            for o in v.row_mut(r) {
                *o *= f;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        self.push("mul_col", v, Op::MulCol(x, s), rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|o| *o *= k);
        let rg = self.rg(x);
        self.push("scale", v, Op::Scale(x, k), rg)
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Arc<Vec<f64>>) -> Result<Var> {
        let tx = self.value(x);
        check_shape("scale_rows", factors.len() == tx.rows, || {
            format!("{} factors for {} rows", factors.len(), tx.rows)
        })?;
        let mut v = tx.clone();
        for (r, f) in factors.iter().enumerate() {
            v.row_mut(r).iter_mut().for_each(|o| *o *= f);
        }
        let rg = self.rg(x);
        self.push("scale_rows", v, Op::ScaleRows(x, factors), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        check_shape("concat_cols", !parts.is_empty(), || "no inputs".into())?;
        let rows = self.shape(parts[0])[0];
        for &p in parts {
            let s = self.shape(p);
            check_shape("concat_cols", s[0] == rows, || format!("row count {} vs {rows}", s[0]))?;
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                v.row_mut(r)[c0..c0 + src.len()].copy_from_slice(src);
                c0 += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_cols", v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        check_shape("concat_rows", !parts.is_empty(), || "no inputs".into())?;
        let cols = self.shape(parts[0])[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            check_shape("concat_rows", t.cols == cols, || format!("col count {} vs {cols}", t.cols))?;
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_rows", Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|o| *o = o.max(0.0));
        let rg = self.rg(x);
        self.push("relu", v, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|o| {
            if *o < 0.0 {
                *o *= slope
            }
        });
        let rg = self.rg(x);
        self.push("leaky_relu", v, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|o| *o = sigmoid(*o));
        let rg = self.rg(x);
        self.push("sigmoid", v, Op::Sigmoid(x), rg)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols as f64;
        let mut v = tx.clone();
        let mut inv = Vec::with_capacity(tx.rows);
        for r in 0..tx.rows {
            let row = v.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|a| *a = (*a - mean) * is);
            inv.push(is);
        }
        let rg = self.rg(x);
        self.push("layer_norm", v, Op::LayerNorm(x, inv), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut v = self.value(x).clone();
        for r in 0..v.rows {
            softmax_in_place(v.row_mut(r));
        }
        let rg = self.rg(x);
        self.push("softmax_rows", v, Op::SoftmaxRows(x), rg)
    }

    /// Softmax of an `E x 1` column within groups sharing the same `segment[e]`.
    pub fn segment_softmax(&mut self, x: Var, segment: Arc<Vec<usize>>) -> Result<Var> {
        let tx = self.value(x);
        check_shape("segment_softmax", tx.cols == 1 && tx.rows == segment.len(), || {
            format!("{:?} with {} segment ids", tx.shape(), segment.len())
        })?;
        let n_seg = segment.iter().copied().max().map_or(0, |m| m + 1);
        let mut mx = vec![f64::NEG_INFINITY; n_seg];
        for (e, &s) in segment.iter().enumerate() {
            mx[s] = mx[s].max(tx.data[e]);
        }
        let mut v = tx.clone();
        let mut den = vec![0.0; n_seg];
        for (e, &s) in segment.iter().enumerate() {
            v.data[e] = (v.data[e] - mx[s]).exp();
            den[s] += v.data[e];
        }
        for (e, &s) in segment.iter().enumerate() {
            v.data[e] /= den[s];
        }
        let rg = self.rg(x);
        self.push("segment_softmax", v, Op::SegmentSoftmax(x, segment), rg)
    }

    /// Row `i` of the output is the columnwise max over rows `sets.set(i)` of `x`;
    /// empty sets give a zero row. Ties resolve to the lowest row index.
    pub fn segment_max(&mut self, x: Var, sets: &IndexSets) -> Result<Var> {
        let tx = self.value(x);
        if let Some(m) = sets.max_item() {
            check_shape("segment_max", m < tx.rows, || format!("index {m} into {} rows", tx.rows))?;
        }
        let c = tx.cols;
        let mut v = Tensor::zeros(sets.len(), c);
        let mut arg = vec![NO_ARGMAX; sets.len() * c];
        for i in 0..sets.len() {
            for &j in sets.set(i) {
                let row = tx.row(j);
                for k in 0..c {
                    let a = &mut arg[i * c + k];
                    let better = *a == NO_ARGMAX
                        || row[k] > v.data[i * c + k]
                        || (row[k] == v.data[i * c + k] && j < *a);
                    if better {
                        *a = j;
                        v.data[i * c + k] = row[k];
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push("segment_max", v, Op::SegmentMax(x, arg), rg)
    }

    /// Output row `r` is `x[idx[r]]`, or a zero row for `None`.
    pub fn gather(&mut self, x: Var, idx: Arc<Vec<Option<usize>>>) -> Result<Var> {
        let tx = self.value(x);
        if let Some(m) = idx.iter().flatten().max() {
            check_shape("gather", *m < tx.rows, || format!("index {m} into {} rows", tx.rows))?;
        }
        let mut v = Tensor::zeros(idx.len(), tx.cols);
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = i {
                v.row_mut(r).copy_from_slice(tx.row(*i));
            }
        }
        let rg = self.rg(x);
        self.push("gather", v, Op::Gather(x, idx), rg)
    }

    /// Output row `idx[r]` accumulates input row `r`, in input order.
    pub fn scatter_sum(&mut self, x: Var, idx: Arc<Vec<usize>>, n_out: usize) -> Result<Var> {
        let tx = self.value(x);
        check_shape("scatter_sum", idx.len() == tx.rows, || {
            format!("{} indices for {} rows", idx.len(), tx.rows)
        })?;
        if let Some(m) = idx.iter().max() {
            check_shape("scatter_sum", *m < n_out, || format!("index {m} into {n_out} rows"))?;
        }
        let mut v = Tensor::zeros(n_out, tx.cols);
        for (r, &i) in idx.iter().enumerate() {
            for (o, a) in v.row_mut(i).iter_mut().zip(tx.row(r)) {
                *o += a;
            }
        }
        let rg = self.rg(x);
        self.push("scatter_sum", v, Op::ScatterSum(x, idx), rg)
    }

    /// `A * x` for a 0/1 matrix `A` with `n_out` rows given as `(row, col)` pairs.
    pub fn spmm(&mut self, pairs: Arc<Vec<(usize, usize)>>, x: Var, n_out: usize) -> Result<Var> {
        let tx = self.value(x);
        for &(i, j) in pairs.iter() {
            check_shape("spmm", i < n_out && j < tx.rows, || {
                format!("pair ({i},{j}) for {n_out} x {}", tx.rows)
            })?;
        }
        let mut v = Tensor::zeros(n_out, tx.cols);
        for &(i, j) in pairs.iter() {
            let c = tx.cols;
            let (src, dst) = (&tx.data[j * c..(j + 1) * c], &mut v.data[i * c..(i + 1) * c]);
            for (o, a) in dst.iter_mut().zip(src) {
                *o += a;
            }
        }
        let rg = self.rg(x);
        self.push("spmm", v, Op::SpMM(x, pairs), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        check_shape("mean", !t.is_empty(), || "empty input".into())?;
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x);
        check_shape("reshape", t.len() == rows * cols, || format!("{:?} to [{rows}, {cols}]", t.shape()))?;
        let v = Tensor::from_vec(rows, cols, t.data.clone());
        let rg = self.rg(x);
        self.push("reshape", v, Op::Reshape(x), rg)
    }

    /// Smooth-L1 with transition at 1 between `pred` and a constant target.
    pub fn smooth_l1(&mut self, pred: Var, target: Arc<Tensor>, red: Reduction) -> Result<Var> {
        let tp = self.value(pred);
        check_shape("smooth_l1", tp.shape() == target.shape(), || {
            format!("{:?} vs {:?}", tp.shape(), target.shape())
        })?;
        check_shape("smooth_l1", !tp.is_empty(), || "empty input".into())?;
        let mut s: f64 = tp.data.iter().zip(&target.data).map(|(p, t)| smooth_l1(p - t)).sum();
        if red == Reduction::Mean {
            s /= tp.len() as f64;
        }
        let rg = self.rg(pred);
        self.push("smooth_l1", Tensor::scalar(s), Op::SmoothL1(pred, target, red), rg)
    }

    /// Penalty-reduced focal loss on probabilities `pred` against soft labels; entries equal
    /// to 1 are positives. Normalized by the positive count (at least 1).
    pub fn focal_loss(&mut self, pred: Var, labels: Arc<Vec<f64>>, alpha: f64, beta: f64) -> Result<Var> {
        let tp = self.value(pred);
        check_shape("focal_loss", tp.len() == labels.len(), || {
            format!("{} predictions vs {} labels", tp.len(), labels.len())
        })?;
        let n_pos = labels.iter().filter(|&&h| h == 1.0).count().max(1) as f64;
        let fp = FocalParams { alpha, beta, n_pos };
        let s: f64 = tp
            .data
            .iter()
            .zip(labels.iter())
            .map(|(&p, &h)| focal_term(p, h, &fp).0)
            .sum();
        let rg = self.rg(pred);
        self.push("focal_loss", Tensor::scalar(-s / n_pos), Op::Focal(pred, labels, fp), rg)
    }

    /// `x * W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Grads> {
        let t = self.value(out);
        check_shape("backward", t.len() == 1, || format!("non-scalar output {:?}", t.shape()))?;
        self.backward_with_seed(out, Tensor::filled(t.rows, t.cols, 1.0))
    }

    /// Reverse pass with an explicit output cotangent.
    pub fn backward_with_seed(&self, out: Var, seed: Tensor) -> Result<Grads> {
        check_shape("backward", seed.shape() == self.shape(out), || {
            format!("seed {:?} for output {:?}", seed.shape(), self.shape(out))
        })?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.rg(v) {
            return;
        }
        let [r, c] = self.shape(v);
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c));
        f(slot);
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                let mut n = g.clone();
                n.data.iter_mut().for_each(|x| *x = -*x);
                self.acc(grads, *b, n);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, |s| {
                    for ((o, gg), bb) in s.data.iter_mut().zip(&g.data).zip(&tb.data) {
                        *o += gg * bb;
                    }
                });
                self.acc_with(grads, *b, |s| {
                    for ((o, gg), aa) in s.data.iter_mut().zip(&g.data).zip(&ta.data) {
                        *o += gg * aa;
                    }
                });
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, g.clone());
                self.acc_with(grads, *b, |s| {
                    for r in 0..g.rows {
                        for (o, gg) in s.data.iter_mut().zip(g.row(r)) {
                            *o += gg;
                        }
                    }
                });
            }
            Op::MulRow(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                self.acc_with(grads, *x, |s| {
                    for r in 0..g.rows {
                        let (sr, gr) = (&mut s.data[r * g.cols..(r + 1) * g.cols], g.row(r));
                        for ((o, gg), ww) in sr.iter_mut().zip(gr).zip(&tw.data) {
                            *o += gg * ww;
                        }
                    }
                });
                self.acc_with(grads, *w, |s| {
                    for r in 0..g.rows {
                        for ((o, gg), xx) in s.data.iter_mut().zip(g.row(r)).zip(tx.row(r)) {
                            *o += gg * xx;
                        }
                    }
                });
            }
            Op::MulCol(x, c) => {
                let (tx, tc) = (self.value(*x), self.value(*c));
                self.acc_with(grads, *x, |s| {
                    for r in 0..g.rows {
                        let f = tc.data[r];
                        let (sr, gr) = (&mut s.data[r * g.cols..(r + 1) * g.cols], g.row(r));
                        for (o, gg) in sr.iter_mut().zip(gr) {
                            *o += gg * f;
                        }
                    }
                });
                self.acc_with(grads, *c, |s| {
                    for r in 0..g.rows {
                        s.data[r] += dot(g.row(r), tx.row(r));
                    }
                });
            }
            Op::Scale(x, k) => {
                let mut n = g.clone();
                n.data.iter_mut().for_each(|v| *v *= k);
                self.acc(grads, *x, n);
            }
            Op::ScaleRows(x, f) => {
                let mut n = g.clone();
                for (r, k) in f.iter().enumerate() {
                    n.row_mut(r).iter_mut().for_each(|v| *v *= k);
                }
                self.acc(grads, *x, n);
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    self.acc_with(grads, p, |s| {
                        for r in 0..g.rows {
                            for (o, gg) in s.row_mut(r).iter_mut().zip(&g.row(r)[c0..c0 + pc]) {
                                *o += gg;
                            }
                        }
                    });
                    c0 += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc_with(grads, p, |s| {
                        for (o, gg) in s.data.iter_mut().zip(&g.data[off..off + n]) {
                            *o += gg;
                        }
                    });
                    off += n;
                }
            }
            Op::Relu(x) => {
                let mut n = g.clone();
                for (v, yy) in n.data.iter_mut().zip(&y.data) {
                    if *yy <= 0.0 {
                        *v = 0.0;
                    }
                }
                self.acc(grads, *x, n);
            }
            Op::LeakyRelu(x, slope) => {
                let tx = self.value(*x);
                let mut n = g.clone();
                for (v, xx) in n.data.iter_mut().zip(&tx.data) {
                    if *xx < 0.0 {
                        *v *= slope;
                    }
                }
                self.acc(grads, *x, n);
            }
            Op::Sigmoid(x) => {
                let mut n = g.clone();
                for (v, yy) in n.data.iter_mut().zip(&y.data) {
                    *v *= yy * (1.0 - yy);
                }
                self.acc(grads, *x, n);
            }
            Op::LayerNorm(x, inv) => {
                let c = y.cols as f64;
                let mut n = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let sg: f64 = gr.iter().sum();
                    let sgy = dot(gr, yr);
                    let k = inv[r] / c;
                    for ((o, gg), yy) in n.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = k * (c * gg - sg - yy * sgy);
                    }
                }
                self.acc(grads, *x, n);
            }
            Op::SoftmaxRows(x) => {
                let mut n = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let s = dot(gr, yr);
                    for ((o, gg), yy) in n.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = yy * (gg - s);
                    }
                }
                self.acc(grads, *x, n);
            }
            Op::SegmentSoftmax(x, seg) => {
                let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut s = vec![0.0; n_seg];
                for (e, &k) in seg.iter().enumerate() {
                    s[k] += g.data[e] * y.data[e];
                }
                let mut n = Tensor::zeros(y.rows, 1);
                for (e, &k) in seg.iter().enumerate() {
                    n.data[e] = y.data[e] * (g.data[e] - s[k]);
                }
                self.acc(grads, *x, n);
            }
            Op::SegmentMax(x, arg) => {
                let c = y.cols;
                self.acc_with(grads, *x, |s| {
                    for (flat, &j) in arg.iter().enumerate() {
                        if j != NO_ARGMAX {
                            s.data[j * c + flat % c] += g.data[flat];
                        }
                    }
                });
            }
            Op::Gather(x, idx) => {
                self.acc_with(grads, *x, |s| {
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = i {
                            for (o, gg) in s.row_mut(*i).iter_mut().zip(g.row(r)) {
                                *o += gg;
                            }
                        }
                    }
                });
            }
            Op::ScatterSum(x, idx) => {
                self.acc_with(grads, *x, |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, gg) in s.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += gg;
                        }
                    }
                });
            }
            Op::SpMM(x, pairs) => {
                let c = y.cols;
                self.acc_with(grads, *x, |s| {
                    for &(i, j) in pairs.iter() {
                        for (o, gg) in s.data[j * c..(j + 1) * c].iter_mut().zip(&g.data[i * c..(i + 1) * c]) {
                            *o += gg;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let [r, c] = self.shape(*x);
                self.acc(grads, *x, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(x) => {
                let [r, c] = self.shape(*x);
                self.acc(grads, *x, Tensor::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::Reshape(x) => {
                let [r, c] = self.shape(*x);
                self.acc(grads, *x, Tensor::from_vec(r, c, g.data.clone()));
            }
            Op::SmoothL1(p, t, red) => {
                let tp = self.value(*p);
                let k = match red {
                    Reduction::Sum => g.item(),
                    Reduction::Mean => g.item() / tp.len() as f64,
                };
                let data = tp.data.iter().zip(&t.data).map(|(a, b)| k * (a - b).clamp(-1.0, 1.0)).collect();
                self.acc(grads, *p, Tensor::from_vec(tp.rows, tp.cols, data));
            }
            Op::Focal(p, labels, fp) => {
                let tp = self.value(*p);
                let k = -g.item() / fp.n_pos;
                let data = tp
                    .data
                    .iter()
                    .zip(labels.iter())
                    .map(|(&pp, &h)| k * focal_term(pp, h, fp).1)
                    .collect();
                self.acc(grads, *p, Tensor::from_vec(tp.rows, tp.cols, data));
            }
        }
    }

    /// Adds parameter gradients of a backward pass into the store.
    pub fn accumulate_param_grads(&self, grads: &Grads, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

/// Returns the un-negated, un-normalized term and its derivative in `p`.
fn focal_term(p: f64, h: f64, fp: &FocalParams) -> (f64, f64) {
    let clamped = !(FOCAL_CLAMP..=1.0 - FOCAL_CLAMP).contains(&p);
    let p = p.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
    let (a, b) = (fp.alpha, fp.beta);
    let (f, df) = if h == 1.0 {
        let q = 1.0 - p;
        (
            q.powf(a) * p.ln(),
            -a * q.powf(a - 1.0) * p.ln() + q.powf(a) / p,
        )
    } else {
        let w = (1.0 - h).powf(b);
        let l = (1.0 - p).ln();
        (
            w * p.powf(a) * l,
            w * (a * p.powf(a - 1.0) * l - p.powf(a) / (1.0 - p)),
        )
    };
    (f, if clamped { 0.0 } else { df })
}
