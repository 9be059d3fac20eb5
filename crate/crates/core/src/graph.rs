//! Meta-node bank, learned adjacency and memory querying.

use std::sync::Arc;

use crate::nn::Linear;
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tape::{softmax_in_place, Var};
use crate::tensor::Matrix;

/// Learnable memory `M` of `m` items of width `e`, shared by the adaptive
/// expert's graph and the gating query.
#[derive(Clone, Debug)]
pub struct MetaNodeBank {
    pub items: ParamId,
    pub m: usize,
    pub e: usize,
}

impl MetaNodeBank {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, m: usize, e: usize) -> Self {
        Self {
            items: store.add(format!("{name}.items"), init.xavier(m, e)),
            m,
            e,
        }
    }
}

/// Node embeddings `softmax(P) M W_E`, one row per node.
#[derive(Clone, Debug)]
pub struct HyperNetwork {
    /// Per-node mixing logits over memory items, `[N, m]`.
    pub mixing: ParamId,
    /// `[e, e]`
    pub w_e: ParamId,
}

impl HyperNetwork {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, n_nodes: usize, m: usize, e: usize) -> Self {
        Self {
            mixing: store.add(format!("{name}.mixing"), init.xavier(n_nodes, m)),
            w_e: store.add(format!("{name}.w_e"), init.xavier(e, e)),
        }
    }

    pub fn node_embeddings(&self, ctx: &mut Ctx, bank: &MetaNodeBank) -> Var {
        let p = ctx.p(self.mixing);
        let p = ctx.tape.row_softmax(p);
        let m = ctx.p(bank.items);
        let w = ctx.p(self.w_e);
        let mw = ctx.tape.matmul(m, w);
        ctx.tape.matmul(p, mw)
    }

    /// `softmax(relu(E E^T))`, `[N, N]`.
    pub fn adjacency(&self, ctx: &mut Ctx, bank: &MetaNodeBank) -> Var {
        let e = self.node_embeddings(ctx, bank);
        adjacency_from_embeddings(ctx, e)
    }
}

pub fn adjacency_from_embeddings(ctx: &mut Ctx, e: Var) -> Var {
    let s = ctx.tape.matmul_nt(e, e);
    let s = ctx.tape.relu(s);
    ctx.tape.row_softmax(s)
}

/// Plain evaluation of `softmax(relu(E E^T))`.
pub fn adaptive_adjacency(e: &Matrix) -> Matrix {
    let n = e.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let s: f64 = e.row(i).iter().zip(e.row(j)).map(|(a, b)| a * b).sum();
            out.set(i, j, s.max(0.0));
        }
        softmax_in_place(out.row_mut(i));
    }
    out
}

/// One-hop propagation `A H W + b` applied at every `(batch, step)` block of
/// `N` rows.
pub fn graph_convolution(ctx: &mut Ctx, h: Var, adjacency: Var, lin: &Linear) -> Var {
    let hw = lin.forward(ctx, h);
    ctx.tape.block_mix(adjacency, hw)
}

/// Projection of raw node features into memory-query space.
#[derive(Clone, Debug)]
pub struct GatingQuery {
    pub linear: Linear,
}

impl GatingQuery {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, e: usize) -> Self {
        Self {
            linear: Linear::new(store, init, name, channels, e),
        }
    }

    /// Returns `(attention over items [R, m], read-out [R, e])` for the
    /// feature rows `x` `[R, C]`.
    pub fn query(&self, ctx: &mut Ctx, x: Var, bank: &MetaNodeBank) -> (Var, Var) {
        let q = self.linear.forward(ctx, x);
        let m = ctx.p(bank.items);
        let logits = ctx.tape.matmul_nt(q, m);
        let a = ctx.tape.row_softmax(logits);
        let o = ctx.tape.matmul(a, m);
        (a, o)
    }
}

/// Plain evaluation of a memory query for one feature vector. Returns the
/// item weights and the read-out.
pub fn query_memory(x: &[f64], bank: &Matrix, w_q: &Matrix, b_q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let e = bank.cols();
    let q: Vec<f64> = (0..e)
        .map(|c| b_q[c] + x.iter().enumerate().map(|(k, xk)| xk * w_q.get(k, c)).sum::<f64>())
        .collect();
    let mut a: Vec<f64> = (0..bank.rows())
        .map(|j| q.iter().zip(bank.row(j)).map(|(u, v)| u * v).sum())
        .collect();
    softmax_in_place(&mut a);
    let o = (0..e)
        .map(|c| (0..bank.rows()).map(|j| a[j] * bank.get(j, c)).sum())
        .collect();
    (a, o)
}

/// Broadcasts per-`(b, n)` rows to every `(b, t, n)` row.
pub fn broadcast_over_steps(ctx: &mut Ctx, x: Var, batch: usize, steps: usize, nodes: usize) -> Var {
    let idx: Vec<usize> = (0..batch)
        .flat_map(|b| (0..steps).flat_map(move |_| (0..nodes).map(move |n| b * nodes + n)))
        .collect();
    ctx.tape.gather_rows(x, Arc::new(idx))
}
