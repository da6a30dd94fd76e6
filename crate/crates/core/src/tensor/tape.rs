//! Tape-based reverse-mode differentiation.
//!
//! Operations are recorded on a [`Tape`] as they execute; [`Tape::backward`]
//! walks the tape in reverse and accumulates gradients for every node that
//! depends on a differentiable leaf. Accumulation order is the tape order, so
//! gradients are bit-reproducible.

use std::rc::Rc;

use super::{gemm, Adjacency, Tensor};
use crate::error::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    MulConst(Var, Rc<Tensor>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var, Option<Rc<Vec<bool>>>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    Sum(Var),
    WeightedSum(Var, Rc<Tensor>),
    GatherRows(Var, Rc<Vec<Option<u32>>>),
    SelectRows(Var, Var, Rc<Vec<bool>>),
    SegmentMean(Var, Rc<Vec<u32>>, Rc<Vec<u32>>),
    L2NormalizeRows(Var),
    NeighborMean(Var, Rc<Adjacency>),
    SageConv {
        input: Var,
        weights: Vec<Var>,
        biases: Vec<Var>,
        adjacency: Vec<Rc<Adjacency>>,
        means: Vec<Tensor>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of differentiable leaves after [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        rows: t.rows,
        cols: t.cols,
        data: t.data.iter().map(|&x| f(x)).collect(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(op, ta, tb)?;
        Ok(Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows != 1 || tr.cols != ta.cols {
            return Err(TensorError::shape(
                "add_row",
                format!("{:?} + row {:?}", ta.shape(), tr.shape()),
            ));
        }
        let mut value = ta.clone();
        for r in 0..value.rows {
            for (x, b) in value.row_mut(r).iter_mut().zip(&tr.data) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = map(self.value(a), |x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Affine(a, s), rg)
    }

    /// Element-wise product with a constant, e.g. a dropout mask.
    pub fn mul_const(&mut self, a: Var, c: Rc<Tensor>) -> Result<Var, TensorError> {
        let ta = self.value(a);
        check_same("mul_const", ta, &c)?;
        let value = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().zip(&c.data).map(|(x, y)| x * y).collect(),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MulConst(a, c), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = map(self.value(a), |x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = map(self.value(a), sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = map(self.value(a), f64::tanh);
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = map(self.value(a), f64::exp);
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = map(self.value(a), f64::ln);
        let rg = self.rg(&[a]);
        self.push(value, Op::Log(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut value = ta.clone();
        for r in 0..value.rows {
            let row = value.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax(self.value(a), None);
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSoftmaxRows(a, None), rg)
    }

    /// Row-wise log-softmax over the entries where `mask` is true. Masked-out
    /// entries come out as zero and receive no gradient. Every row needs at
    /// least one unmasked entry.
    pub fn masked_log_softmax_rows(&mut self, a: Var, mask: Rc<Vec<bool>>) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return Err(TensorError::shape(
                "masked_log_softmax_rows",
                format!("mask of {} for {:?}", mask.len(), ta.shape()),
            ));
        }
        for r in 0..ta.rows {
            if !mask[r * ta.cols..(r + 1) * ta.cols].iter().any(|&m| m) {
                return Err(TensorError::shape(
                    "masked_log_softmax_rows",
                    format!("row {r} is fully masked"),
                ));
            }
        }
        let value = log_softmax(ta, Some(&mask));
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LogSoftmaxRows(a, Some(mask)), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = self.value(parts[0]).rows;
        if parts.iter().any(|&p| self.value(p).rows != rows) {
            return Err(TensorError::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            for r in 0..rows {
                value.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let cols = self.value(parts[0]).cols;
        if parts.iter().any(|&p| self.value(p).cols != cols) {
            return Err(TensorError::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let value = Tensor {
            rows: data.len() / cols.max(1),
            cols,
            data,
        };
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if start > end || end > ta.cols {
            return Err(TensorError::shape(
                "slice_cols",
                format!("{start}..{end} of {} columns", ta.cols),
            ));
        }
        let w = end - start;
        let mut value = Tensor::zeros(ta.rows, w);
        for r in 0..ta.rows {
            value.data[r * w..(r + 1) * w].copy_from_slice(&ta.row(r)[start..end]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    /// Column-wise mean: `r x c` to `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.rows == 0 {
            return Err(TensorError::shape("mean_rows", "no rows"));
        }
        let mut value = Tensor::zeros(1, ta.cols);
        for r in 0..ta.rows {
            for (o, x) in value.data.iter_mut().zip(ta.row(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / ta.rows as f64;
        value.data.iter_mut().for_each(|x| *x *= inv);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MeanRows(a), rg))
    }

    /// Sum of all entries, as `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// `sum(w * a)` for a constant weight tensor `w`, as `1 x 1`.
    pub fn weighted_sum(&mut self, a: Var, w: Rc<Tensor>) -> Result<Var, TensorError> {
        let ta = self.value(a);
        check_same("weighted_sum", ta, &w)?;
        let s = ta.data.iter().zip(&w.data).map(|(x, y)| x * y).sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, w), rg))
    }

    /// Row `i` of the output is row `idx[i]` of `a`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<Option<u32>>>) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let cols = ta.cols;
        let mut value = Tensor::zeros(idx.len(), cols);
        for (i, src) in idx.iter().enumerate() {
            if let Some(s) = *src {
                if s as usize >= ta.rows {
                    return Err(TensorError::shape(
                        "gather_rows",
                        format!("row {s} of {}", ta.rows),
                    ));
                }
                value.data[i * cols..(i + 1) * cols].copy_from_slice(ta.row(s as usize));
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::GatherRows(a, idx), rg))
    }

    /// Row `i` comes from `a` where `pick_a[i]`, otherwise from `b`.
    pub fn select_rows(&mut self, a: Var, b: Var, pick_a: Rc<Vec<bool>>) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same("select_rows", ta, tb)?;
        if pick_a.len() != ta.rows {
            return Err(TensorError::shape("select_rows", "mask length differs from rows"));
        }
        let mut value = tb.clone();
        for (r, &p) in pick_a.iter().enumerate() {
            if p {
                value.row_mut(r).copy_from_slice(ta.row(r));
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::SelectRows(a, b, pick_a), rg))
    }

    /// Mean of the rows sharing each segment id; `num_segments` output rows.
    /// Every segment must be non-empty.
    pub fn segment_mean(&mut self, a: Var, segment: Rc<Vec<u32>>, num_segments: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if segment.len() != ta.rows {
            return Err(TensorError::shape("segment_mean", "segment ids differ from rows"));
        }
        let mut counts = vec![0u32; num_segments];
        for &s in segment.iter() {
            if s as usize >= num_segments {
                return Err(TensorError::shape("segment_mean", format!("segment {s} out of range")));
            }
            counts[s as usize] += 1;
        }
        if counts.iter().any(|&c| c == 0) {
            return Err(TensorError::shape("segment_mean", "empty segment"));
        }
        let cols = ta.cols;
        let mut value = Tensor::zeros(num_segments, cols);
        for (r, &s) in segment.iter().enumerate() {
            let dst = &mut value.data[s as usize * cols..(s as usize + 1) * cols];
            for (d, x) in dst.iter_mut().zip(ta.row(r)) {
                *d += x;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            let inv = 1.0 / f64::from(c);
            value.row_mut(s).iter_mut().for_each(|x| *x *= inv);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SegmentMean(a, segment, Rc::new(counts)), rg))
    }

    /// Scales each row to unit L2 norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let (value, _) = l2_normalize_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::L2NormalizeRows(a), rg)
    }

    /// Row `v`: mean of `a`'s rows over `v`'s neighbors (zero if isolated).
    pub fn neighbor_mean(&mut self, a: Var, adj: Rc<Adjacency>) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if adj.num_nodes() != ta.rows {
            return Err(TensorError::shape(
                "neighbor_mean",
                format!("{} adjacency rows for {} nodes", adj.num_nodes(), ta.rows),
            ));
        }
        let mut value = Tensor::zeros(ta.rows, ta.cols);
        adj.mean_aggregate(&ta.data, ta.cols, &mut value.data);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::NeighborMean(a, adj), rg))
    }

    /// Sum over relation types of GraphSAGE-style linear maps on
    /// `concat(h_v, mean_{u in N_r(v)} h_u)`:
    ///
    /// `out = sum_r [h | m_r] W_r + b_r`, with `W_r` of shape `2d x o`.
    ///
    /// Equivalent to composing `neighbor_mean`, `concat_cols`, `matmul` and
    /// `add_row` per relation, in one tape node.
    pub fn sage_conv(
        &mut self,
        input: Var,
        weights: &[Var],
        biases: &[Var],
        adjacency: &[Rc<Adjacency>],
    ) -> Result<Var, TensorError> {
        let h = self.value(input);
        let (n, d) = (h.rows, h.cols);
        if weights.is_empty() || weights.len() != biases.len() || weights.len() != adjacency.len() {
            return Err(TensorError::shape("sage_conv", "relation counts differ"));
        }
        let o = self.value(weights[0]).cols;
        for ((&w, &b), adj) in weights.iter().zip(biases).zip(adjacency) {
            let (tw, tb) = (self.value(w), self.value(b));
            if tw.shape() != [2 * d, o] || tb.shape() != [1, o] || adj.num_nodes() != n {
                return Err(TensorError::shape(
                    "sage_conv",
                    format!(
                        "input {n}x{d}, weight {:?}, bias {:?}, adjacency {}",
                        tw.shape(),
                        tb.shape(),
                        adj.num_nodes()
                    ),
                ));
            }
        }
        let self_w = self.summed_self_weight(weights, d, o);
        let mut out = Tensor::zeros(n, o);
        gemm(n, d, o, &h.data, false, &self_w, false, &mut out.data);
        let mut means = Vec::with_capacity(weights.len());
        for (&w, adj) in weights.iter().zip(adjacency) {
            let mut m = Tensor::zeros(n, d);
            adj.mean_aggregate(&h.data, d, &mut m.data);
            let tw = &self.nodes[w.0].value;
            gemm(n, d, o, &m.data, false, &tw.data[d * o..], false, &mut out.data);
            means.push(m);
        }
        for &b in biases {
            let tb = &self.nodes[b.0].value;
            for r in 0..n {
                for (x, y) in out.row_mut(r).iter_mut().zip(&tb.data) {
                    *x += y;
                }
            }
        }
        let mut deps = vec![input];
        deps.extend_from_slice(weights);
        deps.extend_from_slice(biases);
        let rg = self.rg(&deps);
        Ok(self.push(
            out,
            Op::SageConv {
                input,
                weights: weights.to_vec(),
                biases: biases.to_vec(),
                adjacency: adjacency.to_vec(),
                means,
            },
            rg,
        ))
    }

    fn summed_self_weight(&self, weights: &[Var], d: usize, o: usize) -> Vec<f64> {
        let mut s = vec![0.0; d * o];
        for &w in weights {
            for (a, b) in s.iter_mut().zip(&self.nodes[w.0].value.data[..d * o]) {
                *a += b;
            }
        }
        s
    }

    /// Number of relu inputs within `eps` of the kink at zero; finite
    /// differences straddling such entries are unreliable.
    pub fn relu_inputs_near_zero(&self, eps: f64) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) if n.requires_grad => Some(a),
                _ => None,
            })
            .map(|a| {
                self.nodes[a.0]
                    .value
                    .data
                    .iter()
                    .filter(|x| x.abs() < eps)
                    .count()
            })
            .sum()
    }

    /// Sign of every relu input on the tape (`true` for positive), in
    /// recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) if n.requires_grad => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data.iter().map(|&x| x > 0.0))
            .collect()
    }

    /// Backpropagates from a `1 x 1` root. Gradients are kept for leaves
    /// only; intermediate gradients are released as soon as they are used.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let rv = self.value(root);
        if rv.shape() != [1, 1] {
            return Err(TensorError::shape("backward", format!("root is {:?}", rv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let t = &self.nodes[v.0].value;
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(t.rows, t.cols)))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                if let Some(ga) = self.buf(grads, *a) {
                    gemm(m, n, k, &g.data, false, &tb.data, true, &mut ga.data);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    gemm(k, m, n, &ta.data, true, &g.data, false, &mut gb.data);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, map(g, |x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.buf(grads, *a) {
                    for ((d, x), y) in ga.data.iter_mut().zip(&g.data).zip(&tb.data) {
                        *d += x * y;
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for ((d, x), y) in gb.data.iter_mut().zip(&g.data).zip(&ta.data) {
                        *d += x * y;
                    }
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if let Some(gr) = self.buf(grads, *row) {
                    for r in 0..g.rows {
                        for (d, x) in gr.data.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Affine(a, s) => self.accumulate(grads, *a, map(g, |x| x * s)),
            Op::MulConst(a, c) => {
                if let Some(ga) = self.buf(grads, *a) {
                    for ((d, x), y) in ga.data.iter_mut().zip(&g.data).zip(&c.data) {
                        *d += x * y;
                    }
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                if let Some(ga) = self.buf(grads, *a) {
                    for ((d, x), inp) in ga.data.iter_mut().zip(&g.data).zip(&ta.data) {
                        if *inp > 0.0 {
                            *d += x;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    for ((d, x), y) in ga.data.iter_mut().zip(&g.data).zip(&out.data) {
                        *d += x * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    for ((d, x), y) in ga.data.iter_mut().zip(&g.data).zip(&out.data) {
                        *d += x * (1.0 - y * y);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    for ((d, x), y) in ga.data.iter_mut().zip(&g.data).zip(&out.data) {
                        *d += x * y;
                    }
                }
            }
            Op::Log(a) => {
                let ta = self.value(*a);
                if let Some(ga) = self.buf(grads, *a) {
                    for ((d, x), inp) in ga.data.iter_mut().zip(&g.data).zip(&ta.data) {
                        *d += x / inp;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    for r in 0..out.rows {
                        let (y, gy) = (out.row(r), g.row(r));
                        let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                        for ((d, p), q) in ga.row_mut(r).iter_mut().zip(y).zip(gy) {
                            *d += p * (q - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a, mask) => {
                if let Some(ga) = self.buf(grads, *a) {
                    let cols = out.cols;
                    for r in 0..out.rows {
                        let (y, gy) = (out.row(r), g.row(r));
                        let keep = |c: usize| mask.as_ref().is_none_or(|m| m[r * cols + c]);
                        let total: f64 = (0..cols).filter(|&c| keep(c)).map(|c| gy[c]).sum();
                        let row = ga.row_mut(r);
                        for c in 0..cols {
                            if keep(c) {
                                row[c] += gy[c] - y[c].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols;
                    if let Some(gp) = self.buf(grads, p) {
                        for r in 0..g.rows {
                            for (d, x) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *d += x;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.buf(grads, p) {
                        for (d, x) in gp.data.iter_mut().zip(&g.data[off..off + n]) {
                            *d += x;
                        }
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let w = out.cols;
                if let Some(ga) = self.buf(grads, *a) {
                    for r in 0..g.rows {
                        for (d, x) in ga.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    let inv = 1.0 / ga.rows as f64;
                    for r in 0..ga.rows {
                        for (d, x) in ga.row_mut(r).iter_mut().zip(&g.data) {
                            *d += x * inv;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                if let Some(ga) = self.buf(grads, *a) {
                    ga.data.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::WeightedSum(a, w) => {
                let s = g.item();
                if let Some(ga) = self.buf(grads, *a) {
                    for (d, x) in ga.data.iter_mut().zip(&w.data) {
                        *d += s * x;
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if let Some(ga) = self.buf(grads, *a) {
                    for (i, src) in idx.iter().enumerate() {
                        if let Some(s) = *src {
                            for (d, x) in ga.row_mut(s as usize).iter_mut().zip(g.row(i)) {
                                *d += x;
                            }
                        }
                    }
                }
            }
            Op::SelectRows(a, b, pick_a) => {
                for (v, want) in [(*a, true), (*b, false)] {
                    if let Some(gv) = self.buf(grads, v) {
                        for (r, &p) in pick_a.iter().enumerate() {
                            if p == want {
                                for (d, x) in gv.row_mut(r).iter_mut().zip(g.row(r)) {
                                    *d += x;
                                }
                            }
                        }
                    }
                }
            }
            Op::SegmentMean(a, segment, counts) => {
                if let Some(ga) = self.buf(grads, *a) {
                    for (r, &s) in segment.iter().enumerate() {
                        let inv = 1.0 / f64::from(counts[s as usize]);
                        for (d, x) in ga.row_mut(r).iter_mut().zip(g.row(s as usize)) {
                            *d += x * inv;
                        }
                    }
                }
            }
            Op::L2NormalizeRows(a) => {
                let ta = self.value(*a);
                if let Some(ga) = self.buf(grads, *a) {
                    for r in 0..ta.rows {
                        let norm = ta.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let (y, gy) = (out.row(r), g.row(r));
                        let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                        for ((d, p), q) in ga.row_mut(r).iter_mut().zip(y).zip(gy) {
                            *d += (q - p * dot) / norm;
                        }
                    }
                }
            }
            Op::NeighborMean(a, adj) => {
                if let Some(ga) = self.buf(grads, *a) {
                    adj.mean_aggregate_adjoint(&g.data, g.cols, &mut ga.data);
                }
            }
            Op::SageConv {
                input,
                weights,
                biases,
                adjacency,
                means,
            } => {
                let h = self.value(*input);
                let (n, d, o) = (h.rows, h.cols, g.cols);
                let mut self_grad: Option<Vec<f64>> = None;
                for ((&w, &b), m) in weights.iter().zip(biases).zip(means) {
                    if let Some(gw) = self.buf(grads, w) {
                        let sg = self_grad.get_or_insert_with(|| {
                            let mut s = vec![0.0; d * o];
                            gemm(d, n, o, &h.data, true, &g.data, false, &mut s);
                            s
                        });
                        for (x, y) in gw.data[..d * o].iter_mut().zip(sg.iter()) {
                            *x += y;
                        }
                        gemm(d, n, o, &m.data, true, &g.data, false, &mut gw.data[d * o..]);
                    }
                    if let Some(gb) = self.buf(grads, b) {
                        for r in 0..n {
                            for (x, y) in gb.data.iter_mut().zip(g.row(r)) {
                                *x += y;
                            }
                        }
                    }
                }
                if self.nodes[input.0].requires_grad {
                    let self_w = self.summed_self_weight(weights, d, o);
                    let mut dh = Tensor::zeros(n, d);
                    gemm(n, o, d, &g.data, false, &self_w, true, &mut dh.data);
                    let mut dm = vec![0.0; n * d];
                    for (&w, adj) in weights.iter().zip(adjacency) {
                        dm.iter_mut().for_each(|x| *x = 0.0);
                        let tw = &self.nodes[w.0].value;
                        gemm(n, o, d, &g.data, false, &tw.data[d * o..], true, &mut dm);
                        adj.mean_aggregate_adjoint(&dm, d, &mut dh.data);
                    }
                    self.accumulate(grads, *input, dh);
                }
            }
        }
    }
}

fn log_softmax(t: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let mut value = t.clone();
    let cols = t.cols;
    for r in 0..t.rows {
        let keep = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
        let row = value.row_mut(r);
        let m = (0..cols)
            .filter(|&c| keep(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = (0..cols).filter(|&c| keep(c)).map(|c| (row[c] - m).exp()).sum();
        let lse = m + s.ln();
        for (c, x) in row.iter_mut().enumerate() {
            *x = if keep(c) { *x - lse } else { 0.0 };
        }
    }
    value
}

/// Row-normalized copy and the indices of all-zero rows (left as zero).
pub fn l2_normalize_rows(t: &Tensor) -> (Tensor, Vec<usize>) {
    let mut value = t.clone();
    let mut zero_rows = Vec::new();
    for r in 0..t.rows {
        let row = value.row_mut(r);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            zero_rows.push(r);
            continue;
        }
        row.iter_mut().for_each(|x| *x /= norm);
    }
    (value, zero_rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn mean_rows_example() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![5.0, 7.0]]).unwrap());
        let m = tape.mean_rows(x).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
    }

    #[test]
    fn relu_subgradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[vec![-1.0, 2.0]]).unwrap());
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 2));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
        assert!(tape.add(a, b).is_err());
        assert!(tape.concat_cols(&[a, b]).is_ok());
        let c = tape.constant(Tensor::zeros(3, 3));
        assert!(tape.concat_cols(&[a, c]).is_err());
    }

    #[test]
    fn forward_values_match_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let sm = tape.softmax_rows(v);
        let lsm = tape.log_softmax_rows(v);
        let sg = tape.sigmoid(v);
        let th = tape.tanh(v);
        let nr = tape.l2_normalize_rows(v);
        for r in 0..3 {
            let row = x.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..4 {
                assert!((tape.value(sm).get(r, c) - row[c].exp() / z).abs() < 1e-12);
                assert!((tape.value(lsm).get(r, c) - (row[c] - z.ln())).abs() < 1e-12);
                assert!((tape.value(sg).get(r, c) - 1.0 / (1.0 + (-row[c]).exp())).abs() < 1e-12);
                assert!((tape.value(th).get(r, c) - row[c].tanh()).abs() < 1e-12);
                assert!((tape.value(nr).get(r, c) - row[c] / norm).abs() < 1e-12);
            }
            let s: f64 = tape.value(sm).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_rows_are_flagged_by_normalization() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        let (n, zero) = l2_normalize_rows(&t);
        assert_eq!(zero, vec![0]);
        assert_eq!(n.row(0), &[0.0, 0.0]);
        assert_eq!(n.row(1), &[0.6, 0.8]);
    }

    #[test]
    fn sage_conv_matches_composed_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let adjs = [
            Rc::new(Adjacency::from_lists(&[vec![1], vec![0, 2], vec![1], vec![]])),
            Rc::new(Adjacency::from_lists(&[vec![3], vec![], vec![], vec![0]])),
        ];
        let h = rand_tensor(&mut rng, 4, 3);
        let ws: Vec<Tensor> = (0..2).map(|_| rand_tensor(&mut rng, 6, 5)).collect();
        let bs: Vec<Tensor> = (0..2).map(|_| rand_tensor(&mut rng, 1, 5)).collect();

        let mut tape = Tape::new();
        let hv = tape.param(h.clone());
        let wv: Vec<Var> = ws.iter().map(|w| tape.param(w.clone())).collect();
        let bv: Vec<Var> = bs.iter().map(|b| tape.param(b.clone())).collect();
        let fused = tape.sage_conv(hv, &wv, &bv, &adjs).unwrap();
        let mut composed = None;
        for r in 0..2 {
            let m = tape.neighbor_mean(hv, adjs[r].clone()).unwrap();
            let cat = tape.concat_cols(&[hv, m]).unwrap();
            let z = tape.matmul(cat, wv[r]).unwrap();
            let z = tape.add_row(z, bv[r]).unwrap();
            composed = Some(match composed {
                None => z,
                Some(acc) => tape.add(acc, z).unwrap(),
            });
        }
        let composed = composed.unwrap();
        for (a, b) in tape.value(fused).data().iter().zip(tape.value(composed).data()) {
            assert!((a - b).abs() < 1e-12);
        }

        // gradients of both routes agree
        let probe = Rc::new(rand_tensor(&mut rng, 4, 5));
        let lf = tape.weighted_sum(fused, probe.clone()).unwrap();
        let gf = tape.backward(lf).unwrap();
        let lc = tape.weighted_sum(composed, probe).unwrap();
        let gc = tape.backward(lc).unwrap();
        for v in std::iter::once(hv).chain(wv.iter().copied()).chain(bv.iter().copied()) {
            for (a, b) in gf.get(v).unwrap().data().iter().zip(gc.get(v).unwrap().data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Every op composed into one scalar, checked against central differences.
    #[test]
    fn every_op_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_tensor(&mut rng, 4, 3));
        let b = store.add("b", rand_tensor(&mut rng, 3, 3));
        let w = store.add("w", rand_tensor(&mut rng, 6, 3));
        let bias = store.add("bias", rand_tensor(&mut rng, 1, 3));
        let adj = Rc::new(Adjacency::from_lists(&[vec![1, 2], vec![0], vec![0, 3], vec![2]]));
        let mask = Rc::new((0..16).map(|i| i % 5 != 0).collect::<Vec<bool>>());
        let weights = Rc::new(rand_tensor(&mut rng, 4, 4));
        let report = grad_check(
            &mut store,
            |tape, p| {
                let x = tape.matmul(p[a.index()], p[b.index()])?;
                let x = tape.add_row(x, p[bias.index()])?;
                let s = tape.sigmoid(x);
                let t = tape.tanh(x);
                let x = tape.mul(s, t)?;
                let e = tape.exp(x);
                let l = tape.log(e);
                let x = tape.sub(l, x)?;
                let x = tape.add(x, s)?;
                let nm = tape.neighbor_mean(x, adj.clone())?;
                let sc = tape.sage_conv(x, &[p[w.index()]], &[p[bias.index()]], &[adj.clone()])?;
                let x = tape.add(sc, nm)?;
                let x = tape.relu(x);
                let x = tape.scale(x, 0.7);
                let n = tape.l2_normalize_rows(x);
                let xt = tape.transpose(n);
                let sim = tape.matmul(n, xt)?;
                let ls = tape.masked_log_softmax_rows(sim, mask.clone())?;
                let l1 = tape.weighted_sum(ls, weights.clone())?;
                let sm = tape.softmax_rows(x);
                let gathered = tape.gather_rows(sm, Rc::new(vec![Some(2), None, Some(0)]))?;
                let seg = tape.segment_mean(gathered, Rc::new(vec![0, 1, 0]), 2)?;
                let cat = tape.concat_rows(&[seg, gathered])?;
                let cc = tape.concat_cols(&[cat, cat])?;
                let sl = tape.slice_cols(cc, 2, 5)?;
                let sel = tape.select_rows(sl, cat, Rc::new(vec![true, false, true, false, true]))?;
                let lsm = tape.log_softmax_rows(sel);
                let mr = tape.mean_rows(lsm)?;
                let l2 = tape.sum(mr);
                let c = tape.constant(Tensor::scalar(0.5));
                let l2 = tape.mul(l2, c)?;
                let mc = tape.mul_const(l2, Rc::new(Tensor::scalar(2.0)))?;
                tape.add(l1, mc)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
