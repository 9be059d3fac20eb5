//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns gradients for every node that depends on a trainable leaf.

use std::sync::Arc;

use crate::tensor::{gemm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis along which attention scores are normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnNorm {
    /// Each query row is a distribution over keys (standard attention).
    OverKeys,
    /// Each key column is a distribution over queries.
    OverQueries,
}

/// Row bookkeeping for grouped multi-head attention.
///
/// Group `g` attends query rows `q_rows[g*q_len..][..q_len]` against key/value
/// rows `k_rows[g*k_len..][..k_len]`; the output for query `i` of group `g`
/// lands in row `out_rows[g*q_len + i]` of an `out_count`-row result.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub groups: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub q_rows: Vec<usize>,
    pub k_rows: Vec<usize>,
    pub out_rows: Vec<usize>,
    pub out_count: usize,
}

impl AttnLayout {
    /// Self-attention where each group is a set of rows of one matrix and the
    /// output keeps the input row order.
    pub fn self_attention(groups: Vec<Vec<usize>>, total_rows: usize) -> Self {
        let len = groups.first().map_or(0, Vec::len);
        let rows: Vec<usize> = groups
            .iter()
            .flat_map(|g| {
                assert_eq!(g.len(), len, "groups must be equal-sized");
                g.iter().copied()
            })
            .collect();
        Self {
            groups: groups.len(),
            q_len: len,
            k_len: len,
            q_rows: rows.clone(),
            k_rows: rows.clone(),
            out_rows: rows,
            out_count: total_rows,
        }
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    BlockMix(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    PeriodicFrom(Var, usize),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        // normalized input and 1/sigma per row, cached for backward
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Arc<Vec<usize>>),
    SegmentMean {
        x: Var,
        seg: Arc<Vec<usize>>,
        counts: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RowDot(Var, Var),
    Dropout(Var, Arc<Vec<f64>>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttnLayout>,
        heads: usize,
        norm: AttnNorm,
        weights: Vec<f64>,
    },
    MaskedMae {
        pred: Var,
        target: Arc<Vec<f64>>,
        count: usize,
    },
    RoutingCe {
        p: Var,
        labels: Arc<Matrix>,
    },
    Mean(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradient store returned by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = Matrix::zeros(av.rows(), bv.rows());
        gemm(av, false, bv, true, &mut value, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulNt(a, b), ng)
    }

    /// Applies the square matrix `mix` `[N, N]` to every consecutive block of
    /// `N` rows of `x`: `out[g*N + i] = sum_j mix[i, j] * x[g*N + j]`.
    pub fn block_mix(&mut self, mix: Var, x: Var) -> Var {
        let (mv, xv) = (self.value(mix), self.value(x));
        let n = mv.rows();
        assert_eq!(mv.cols(), n, "mixing matrix must be square");
        assert_eq!(xv.rows() % n, 0, "rows not a multiple of block size");
        let mut value = Matrix::zeros(xv.rows(), xv.cols());
        for g in 0..xv.rows() / n {
            for i in 0..n {
                let out = value.row_mut(g * n + i);
                for j in 0..n {
                    let a = mv.get(i, j);
                    for (o, v) in out.iter_mut().zip(xv.row(g * n + j)) {
                        *o += a * v;
                    }
                }
            }
        }
        let ng = self.ng(mix) || self.ng(x);
        self.push(value, Op::BlockMix(mix, x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a + bias` with `bias` of shape `[1, cols]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a single row");
        assert_eq!(b.cols(), self.value(a).cols(), "bias width");
        let mut value = self.value(a).clone();
        let b = self.value(bias).row(0).to_vec();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(value, Op::AddRow(a, bias), ng)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        let ng = self.ng(a);
        self.push(value, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Identity on columns `< first`, sine on the rest.
    pub fn periodic_from(&mut self, a: Var, first: usize) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            for x in &mut value.row_mut(r)[first..] {
                *x = x.sin();
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::PeriodicFrom(a, first), ng)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(value, Op::RowSoftmax(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gain).row(0);
        let b = self.value(bias).row(0);
        let mut value = xhat.clone();
        for r in 0..rows {
            for ((o, gi), bi) in value.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let value = self.value(a).gather_rows(&idx);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, idx), ng)
    }

    /// Mean of the rows sharing a segment id; `seg[r]` is the segment of row `r`.
    pub fn segment_mean(&mut self, x: Var, seg: Arc<Vec<usize>>, n_seg: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(seg.len(), xv.rows());
        let mut counts = vec![0usize; n_seg];
        let mut value = Matrix::zeros(n_seg, xv.cols());
        for (r, &s) in seg.iter().enumerate() {
            counts[s] += 1;
            for (o, v) in value.row_mut(s).iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                for o in value.row_mut(s) {
                    *o /= c as f64;
                }
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::SegmentMean { x, seg, counts }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let value = self.value(a).slice_cols(start, width);
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    /// Row-wise inner products, shape `[rows, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let data = (0..av.rows())
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        let value = Matrix::from_vec(av.rows(), 1, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::RowDot(a, b), ng)
    }

    /// Multiplies element-wise by a fixed mask (already scaled by `1/(1-rate)`).
    pub fn dropout(&mut self, a: Var, mask: Arc<Vec<f64>>) -> Var {
        let av = self.value(a);
        assert_eq!(mask.len(), av.len());
        let data = av.as_slice().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let value = Matrix::from_vec(av.rows(), av.cols(), data);
        let ng = self.ng(a);
        self.push(value, Op::Dropout(a, mask), ng)
    }

    /// Grouped multi-head scaled dot-product attention. `q`, `k`, `v` are
    /// already projected; head `h` uses columns `[h*dk, (h+1)*dk)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttnLayout>,
        heads: usize,
        norm: AttnNorm,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(kv.cols(), d, "attention key width");
        assert_eq!(vv.cols(), d, "attention value width");
        assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
        let (value, weights) = attention_forward(qv, kv, vv, &layout, heads, norm);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                norm,
                weights,
            },
            ng,
        )
    }

    /// Normalized attention weights recorded by an [`Tape::attention`] node,
    /// laid out `[group][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Mean `|pred - target|` over entries whose target is not exactly zero.
    /// Returns 0 when every entry is masked.
    pub fn masked_mae(&mut self, pred: Var, target: Arc<Vec<f64>>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.len(), target.len(), "masked_mae length");
        let mut sum = 0.0;
        let mut count = 0;
        for (p, &y) in pv.as_slice().iter().zip(target.iter()) {
            if y != 0.0 {
                sum += (y - p).abs();
                count += 1;
            }
        }
        let value = Matrix::scalar(if count > 0 { sum / count as f64 } else { 0.0 });
        let ng = self.ng(pred);
        self.push(
            value,
            Op::MaskedMae {
                pred,
                target,
                count,
            },
            ng,
        )
    }

    /// Mean over rows of `-(1/E) * sum_e labels[e] * ln(max(p[e], 1e-12))`.
    pub fn routing_ce(&mut self, p: Var, labels: Arc<Matrix>) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.shape(), labels.shape(), "routing_ce shape");
        let value = Matrix::scalar(routing_ce_value(pv, &labels));
        let ng = self.ng(p);
        self.push(value, Op::RoutingCe { p, labels }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Matrix::scalar(av.sum() / av.len().max(1) as f64);
        let ng = self.ng(a);
        self.push(value, Op::Mean(a), ng)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(g, false, bv, true, &mut da, 0.0);
                    acc(*a, da);
                }
                if self.ng(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(av, true, g, false, &mut db, 0.0);
                    acc(*b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(g, false, bv, false, &mut da, 0.0);
                    acc(*a, da);
                }
                if self.ng(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(g, true, av, false, &mut db, 0.0);
                    acc(*b, db);
                }
            }
            Op::BlockMix(mix, x) => {
                let (mv, xv) = (self.value(*mix), self.value(*x));
                let n = mv.rows();
                let mut dmix = Matrix::zeros(n, n);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for grp in 0..xv.rows() / n {
                    for i in 0..n {
                        let gi = g.row(grp * n + i);
                        for j in 0..n {
                            let xj = xv.row(grp * n + j);
                            let dot: f64 = gi.iter().zip(xj).map(|(a, b)| a * b).sum();
                            dmix.row_mut(i)[j] += dot;
                            let a = mv.get(i, j);
                            for (o, v) in dx.row_mut(grp * n + j).iter_mut().zip(gi) {
                                *o += a * v;
                            }
                        }
                    }
                }
                acc(*mix, dmix);
                acc(*x, dx);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(bv, |x, y| x * y));
                acc(*b, g.zip_map(av, |x, y| x * y));
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, x) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*bias, db);
            }
            Op::Affine(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, g.zip_map(av, |gx, x| if x > 0.0 { gx } else { 0.0 }));
            }
            Op::PeriodicFrom(a, first) => {
                let av = self.value(*a);
                let mut da = g.clone();
                for r in 0..da.rows() {
                    let src = av.row(r);
                    for (c, o) in da.row_mut(r).iter_mut().enumerate().skip(*first) {
                        *o *= src[c].cos();
                    }
                }
                acc(*a, da);
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, p), q) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dot);
                    }
                }
                acc(*a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).row(0);
                let (rows, cols) = g.shape();
                let mut dgain = Matrix::zeros(1, cols);
                let mut dbias = Matrix::zeros(1, cols);
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let (gr, xr) = (g.row(r), xhat.row(r));
                    for c in 0..cols {
                        dgain.row_mut(0)[c] += gr[c] * xr[c];
                        dbias.row_mut(0)[c] += gr[c];
                    }
                    // dxhat = g * gain
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = inv_std[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let mut da = Matrix::zeros(av.rows(), av.cols());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, x) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*a, da);
            }
            Op::SegmentMean { x, seg, counts } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (r, &s) in seg.iter().enumerate() {
                    let c = counts[s] as f64;
                    for (o, v) in dx.row_mut(r).iter_mut().zip(g.row(s)) {
                        *o = v / c;
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, g.slice_cols(off, w));
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut da = Matrix::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, da);
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = bv.clone();
                let mut db = av.clone();
                for r in 0..g.rows() {
                    let s = g.get(r, 0);
                    da.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    db.row_mut(r).iter_mut().for_each(|x| *x *= s);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Dropout(a, mask) => {
                let data = g.as_slice().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
                acc(*a, Matrix::from_vec(g.rows(), g.cols(), data));
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                norm,
                weights,
            } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    layout,
                    *heads,
                    *norm,
                    weights,
                    g,
                );
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::MaskedMae {
                pred,
                target,
                count,
            } => {
                let pv = self.value(*pred);
                let s = g.item();
                let data = pv
                    .as_slice()
                    .iter()
                    .zip(target.iter())
                    .map(|(&p, &y)| {
                        if y == 0.0 || *count == 0 {
                            0.0
                        } else {
                            // d|y - p|/dp; zero at the kink
                            let diff = p - y;
                            s * (if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }) / *count as f64
                        }
                    })
                    .collect();
                acc(*pred, Matrix::from_vec(pv.rows(), pv.cols(), data));
            }
            Op::RoutingCe { p, labels } => {
                let pv = self.value(*p);
                let (rows, e) = pv.shape();
                let s = g.item() / (rows.max(1) as f64 * e as f64);
                let mut dp = Matrix::zeros(rows, e);
                for r in 0..rows {
                    for c in 0..e {
                        let pe = pv.get(r, c);
                        if pe > CE_CLAMP {
                            dp.set(r, c, -s * labels.get(r, c) / pe);
                        }
                    }
                }
                acc(*p, dp);
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let s = g.item() / av.len().max(1) as f64;
                acc(*a, Matrix::filled(av.rows(), av.cols(), s));
            }
        }
    }
}

pub const CE_CLAMP: f64 = 1e-12;

pub(crate) fn routing_ce_value(p: &Matrix, labels: &Matrix) -> f64 {
    let (rows, e) = p.shape();
    if rows == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for r in 0..rows {
        for c in 0..e {
            let l = labels.get(r, c);
            if l != 0.0 {
                total -= l * p.get(r, c).clamp(CE_CLAMP, 1.0).ln();
            }
        }
    }
    total / (rows as f64 * e as f64)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn gather_head(m: &Matrix, rows: &[usize], c0: usize, dk: usize, buf: &mut [f64]) {
    let d = m.cols();
    let data = m.as_slice();
    for (i, &r) in rows.iter().enumerate() {
        buf[i * dk..(i + 1) * dk].copy_from_slice(&data[r * d + c0..r * d + c0 + dk]);
    }
}

fn scatter_head(m: &mut Matrix, rows: &[usize], c0: usize, dk: usize, buf: &[f64]) {
    let d = m.cols();
    let data = m.as_mut_slice();
    for (i, &r) in rows.iter().enumerate() {
        for (o, x) in data[r * d + c0..r * d + c0 + dk].iter_mut().zip(&buf[i * dk..(i + 1) * dk]) {
            *o += x;
        }
    }
}

/// `out[i] = sum_j a[i, j] * b[j]` for row blocks of width `dk`.
fn mix_rows(a: &[f64], b: &[f64], rows: usize, inner: usize, dk: usize, out: &mut [f64]) {
    out[..rows * dk].fill(0.0);
    for i in 0..rows {
        let o = &mut out[i * dk..(i + 1) * dk];
        for j in 0..inner {
            let s = a[i * inner + j];
            if s == 0.0 {
                continue;
            }
            for (oc, bc) in o.iter_mut().zip(&b[j * dk..(j + 1) * dk]) {
                *oc += s * bc;
            }
        }
    }
}

/// `out[j] = sum_i a[i, j] * b[i]` for row blocks of width `dk`.
fn mix_rows_transposed(a: &[f64], b: &[f64], rows: usize, inner: usize, dk: usize, out: &mut [f64]) {
    out[..inner * dk].fill(0.0);
    for i in 0..rows {
        let bi = &b[i * dk..(i + 1) * dk];
        for j in 0..inner {
            let s = a[i * inner + j];
            if s == 0.0 {
                continue;
            }
            for (oc, bc) in out[j * dk..(j + 1) * dk].iter_mut().zip(bi) {
                *oc += s * bc;
            }
        }
    }
}

fn dot_rows(a: &[f64], b: &[f64], la: usize, lb: usize, dk: usize, scale: f64, out: &mut [f64]) {
    for i in 0..la {
        let ai = &a[i * dk..(i + 1) * dk];
        for j in 0..lb {
            let bj = &b[j * dk..(j + 1) * dk];
            out[i * lb + j] = scale * ai.iter().zip(bj).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    layout: &AttnLayout,
    heads: usize,
    norm: AttnNorm,
) -> (Matrix, Vec<f64>) {
    let d = q.cols();
    let dk = d / heads;
    let (lq, lk) = (layout.q_len, layout.k_len);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Matrix::zeros(layout.out_count, d);
    let mut weights = vec![0.0; layout.groups * heads * lq * lk];
    let mut col = vec![0.0; lq];
    let mut qb = vec![0.0; lq * dk];
    let mut kb = vec![0.0; lk * dk];
    let mut vb = vec![0.0; lk * dk];
    let mut ob = vec![0.0; lq * dk];
    for g in 0..layout.groups {
        let qr = &layout.q_rows[g * lq..(g + 1) * lq];
        let kr = &layout.k_rows[g * lk..(g + 1) * lk];
        let orow = &layout.out_rows[g * lq..(g + 1) * lq];
        for h in 0..heads {
            let c0 = h * dk;
            let w = &mut weights[(g * heads + h) * lq * lk..(g * heads + h + 1) * lq * lk];
            gather_head(q, qr, c0, dk, &mut qb);
            gather_head(k, kr, c0, dk, &mut kb);
            gather_head(v, kr, c0, dk, &mut vb);
            dot_rows(&qb, &kb, lq, lk, dk, scale, w);
            match norm {
                AttnNorm::OverKeys => {
                    for row in w.chunks_exact_mut(lk) {
                        softmax_in_place(row);
                    }
                }
                AttnNorm::OverQueries => {
                    for j in 0..lk {
                        for i in 0..lq {
                            col[i] = w[i * lk + j];
                        }
                        softmax_in_place(&mut col);
                        for i in 0..lq {
                            w[i * lk + j] = col[i];
                        }
                    }
                }
            }
            mix_rows(w, &vb, lq, lk, dk, &mut ob);
            scatter_head(&mut out, orow, c0, dk, &ob);
        }
    }
    (out, weights)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    layout: &AttnLayout,
    heads: usize,
    norm: AttnNorm,
    weights: &[f64],
    g: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let d = q.cols();
    let dk = d / heads;
    let (lq, lk) = (layout.q_len, layout.k_len);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = Matrix::zeros(q.rows(), d);
    let mut dkm = Matrix::zeros(k.rows(), d);
    let mut dv = Matrix::zeros(v.rows(), d);
    let mut da = vec![0.0; lq * lk];
    let mut qb = vec![0.0; lq * dk];
    let mut kb = vec![0.0; lk * dk];
    let mut vb = vec![0.0; lk * dk];
    let mut gb = vec![0.0; lq * dk];
    let mut dqb = vec![0.0; lq * dk];
    let mut dkb = vec![0.0; lk * dk];
    for grp in 0..layout.groups {
        let qr = &layout.q_rows[grp * lq..(grp + 1) * lq];
        let kr = &layout.k_rows[grp * lk..(grp + 1) * lk];
        let orow = &layout.out_rows[grp * lq..(grp + 1) * lq];
        for h in 0..heads {
            let c0 = h * dk;
            let w = &weights[(grp * heads + h) * lq * lk..(grp * heads + h + 1) * lq * lk];
            gather_head(g, orow, c0, dk, &mut gb);
            gather_head(v, kr, c0, dk, &mut vb);
            dot_rows(&gb, &vb, lq, lk, dk, 1.0, &mut da);
            mix_rows_transposed(w, &gb, lq, lk, dk, &mut dkb);
            scatter_head(&mut dv, kr, c0, dk, &dkb);
            // softmax backward along the normalized axis; da becomes dS
            match norm {
                AttnNorm::OverKeys => {
                    for (wr, dr) in w.chunks_exact(lk).zip(da.chunks_exact_mut(lk)) {
                        let dot: f64 = wr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (x, a) in dr.iter_mut().zip(wr) {
                            *x = a * (*x - dot) * scale;
                        }
                    }
                }
                AttnNorm::OverQueries => {
                    for j in 0..lk {
                        let dot: f64 = (0..lq).map(|i| w[i * lk + j] * da[i * lk + j]).sum();
                        for i in 0..lq {
                            let ix = i * lk + j;
                            da[ix] = w[ix] * (da[ix] - dot) * scale;
                        }
                    }
                }
            }
            gather_head(q, qr, c0, dk, &mut qb);
            gather_head(k, kr, c0, dk, &mut kb);
            mix_rows(&da, &kb, lq, lk, dk, &mut dqb);
            mix_rows_transposed(&da, &qb, lq, lk, dk, &mut dkb);
            scatter_head(&mut dq, qr, c0, dk, &dqb);
            scatter_head(&mut dkm, kr, c0, dk, &dkb);
        }
    }
    (dq, dkm, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(sum(w ⊙ f(x)))/dx for a single-input op.
    fn check_unary(x: Matrix, build: impl Fn(&mut Tape, Var) -> Var) {
        let eval = |xm: &Matrix| -> (f64, Option<Matrix>) {
            let mut t = Tape::new();
            let xv = t.param(xm.clone());
            let y = build(&mut t, xv);
            let yv = t.value(y).clone();
            let w = t.constant(Matrix::from_vec(
                yv.rows(),
                yv.cols(),
                (0..yv.len()).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3 + 0.1).collect(),
            ));
            let p = t.mul(y, w);
            let loss = t.mean(p);
            let grads = t.backward(loss);
            (t.value(loss).item(), grads.get(xv).cloned())
        };
        let (_, analytic) = eval(&x);
        let analytic = analytic.expect("gradient");
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= h;
            let fd = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            let an = analytic.as_slice()[i];
            assert!(
                (fd - an).abs() <= 1e-6 + 1e-4 * fd.abs().max(an.abs()),
                "entry {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(sample(5, 4, 3).map(|v| v * 30.0));
        let y = t.row_softmax(x);
        for r in 0..5 {
            let s: f64 = t.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_gradients() {
        check_unary(sample(3, 4, 1), |t, x| t.relu(x));
        check_unary(sample(3, 4, 2), |t, x| t.periodic_from(x, 1));
        check_unary(sample(3, 4, 3), |t, x| t.row_softmax(x));
        check_unary(sample(3, 4, 4), |t, x| t.affine(x, -1.5, 0.2));
        check_unary(sample(4, 3, 5), |t, x| {
            let idx = Arc::new(vec![2, 0, 2, 3, 1]);
            t.gather_rows(x, idx)
        });
        check_unary(sample(4, 3, 6), |t, x| t.segment_mean(x, Arc::new(vec![1, 0, 1, 1]), 2));
        check_unary(sample(3, 5, 7), |t, x| t.slice_cols(x, 1, 3));
    }

    #[test]
    fn layer_norm_gradient() {
        let gain = sample(1, 5, 9).map(|v| v + 1.0);
        let bias = sample(1, 5, 10);
        check_unary(sample(3, 5, 8), move |t, x| {
            let g = t.constant(gain.clone());
            let b = t.constant(bias.clone());
            t.layer_norm(x, g, b, 1e-5)
        });
        // and w.r.t. the gain
        let x = sample(3, 5, 11);
        check_unary(sample(1, 5, 12), move |t, g| {
            let xv = t.constant(x.clone());
            let b = t.constant(Matrix::zeros(1, 5));
            t.layer_norm(xv, g, b, 1e-5)
        });
    }

    #[test]
    fn binary_gradients() {
        let b = sample(4, 2, 21);
        check_unary(sample(3, 4, 20), move |t, x| {
            let bv = t.constant(b.clone());
            t.matmul(x, bv)
        });
        let a = sample(2, 3, 22);
        check_unary(sample(3, 4, 23), move |t, x| {
            let av = t.constant(a.clone());
            t.matmul(av, x)
        });
        let o = sample(3, 4, 24);
        check_unary(sample(3, 4, 25), move |t, x| {
            let ov = t.constant(o.clone());
            let d = t.row_dot(x, ov);
            let m = t.mul(x, ov);
            let c = t.concat_cols(&[d, m, x]);
            let bias = t.constant(sample(1, 9, 26));
            t.add_row(c, bias)
        });
        let b2 = sample(5, 4, 29);
        check_unary(sample(3, 4, 30), move |t, x| {
            let bv = t.constant(b2.clone());
            t.matmul_nt(x, bv)
        });
        let a2 = sample(3, 4, 31);
        check_unary(sample(5, 4, 32), move |t, x| {
            let av = t.constant(a2.clone());
            t.matmul_nt(av, x)
        });
        let xm = sample(6, 2, 33);
        check_unary(sample(3, 3, 34), move |t, m| {
            let xv = t.constant(xm.clone());
            t.block_mix(m, xv)
        });
        let mm = sample(3, 3, 35);
        check_unary(sample(6, 2, 36), move |t, x| {
            let mv = t.constant(mm.clone());
            t.block_mix(mv, x)
        });
        check_unary(sample(1, 4, 27), move |t, bias| {
            let x = t.constant(sample(3, 4, 28));
            t.add_row(x, bias)
        });
    }

    fn attn_layout() -> Arc<AttnLayout> {
        // 2 groups, 3 queries against 2 keys, interleaved rows
        Arc::new(AttnLayout {
            groups: 2,
            q_len: 3,
            k_len: 2,
            q_rows: vec![0, 2, 4, 1, 3, 5],
            k_rows: vec![0, 1, 2, 3],
            out_rows: vec![5, 4, 3, 2, 1, 0],
            out_count: 6,
        })
    }

    #[test]
    fn attention_gradients_both_norms() {
        for norm in [AttnNorm::OverKeys, AttnNorm::OverQueries] {
            let k = sample(4, 4, 31);
            let v = sample(4, 4, 32);
            check_unary(sample(6, 4, 30), move |t, q| {
                let kv = t.constant(k.clone());
                let vv = t.constant(v.clone());
                t.attention(q, kv, vv, attn_layout(), 2, norm)
            });
            let q = sample(6, 4, 33);
            let v = sample(4, 4, 34);
            check_unary(sample(4, 4, 35), move |t, k| {
                let qv = t.constant(q.clone());
                let vv = t.constant(v.clone());
                t.attention(qv, k, vv, attn_layout(), 2, norm)
            });
            let q = sample(6, 4, 36);
            let k = sample(4, 4, 37);
            check_unary(sample(4, 4, 38), move |t, v| {
                let qv = t.constant(q.clone());
                let kv = t.constant(k.clone());
                t.attention(qv, kv, v, attn_layout(), 2, norm)
            });
        }
    }

    #[test]
    fn loss_op_gradients() {
        let target = Arc::new(vec![1.0, 0.0, -2.0, 3.0, 0.5, 0.0]);
        check_unary(sample(6, 1, 40), move |t, p| {
            let l = t.masked_mae(p, target.clone());
            // masked_mae is scalar; expand so the harness weight is nonzero
            t.affine(l, 2.0, 0.0)
        });
        let labels = Arc::new(Matrix::from_rows(&[&[0.0, 0.5, 0.5], &[1.0, 0.0, 0.0]]));
        check_unary(sample(2, 3, 41), move |t, x| {
            let p = t.row_softmax(x);
            t.routing_ce(p, labels.clone())
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::filled(2, 2, 1.0));
        let p = t.param(Matrix::filled(2, 2, 2.0));
        let y = t.mul(c, p);
        let l = t.mean(y);
        let g = t.backward(l);
        assert!(g.get(c).is_none());
        assert!(g.get(p).is_some());
    }
}
